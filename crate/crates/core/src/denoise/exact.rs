use super::{Denoiser, DenoiserOutput};
use crate::data::TabularDistribution;
use crate::error::{DfmError, Result};
use crate::schedule::ConditionalFlow;
use crate::tokens::Token;

/// Bayes posterior by enumerating the support of a tabular distribution.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    dist: TabularDistribution,
    flow: ConditionalFlow,
}

impl ExactPosterior {
    pub fn new(dist: TabularDistribution, flow: ConditionalFlow) -> Result<Self> {
        if dist.size() != flow.alphabet().size() {
            return Err(DfmError::Incompatible(format!(
                "distribution has S={}, flow has S={}",
                dist.size(),
                flow.alphabet().size()
            )));
        }
        Ok(Self { dist, flow })
    }

    pub fn distribution(&self) -> &TabularDistribution {
        &self.dist
    }

    pub fn flow(&self) -> &ConditionalFlow {
        &self.flow
    }
}

impl Denoiser for ExactPosterior {
    fn size(&self) -> usize {
        self.dist.size()
    }

    fn predict(&self, t: f64, xt: &[Token]) -> Result<DenoiserOutput> {
        exact_posterior(&self.dist, &self.flow, t, xt)
    }
}

/// `p(x1^d = k | xt)` marginalized from the joint posterior over the support.
///
/// The time is not clamped: the posterior is well defined wherever
/// `p_t(xt) > 0`, including the endpoints.
pub fn exact_posterior(
    dist: &TabularDistribution,
    flow: &ConditionalFlow,
    t: f64,
    xt: &[Token],
) -> Result<DenoiserOutput> {
    if !(t.is_finite() && (0.0..=1.0).contains(&t)) {
        return Err(DfmError::Domain(format!("time {t} outside [0, 1]")));
    }
    let s = dist.size();
    if s != flow.alphabet().size() {
        return Err(DfmError::Incompatible(format!("distribution has S={s}, flow has S={}", flow.alphabet().size())));
    }
    if xt.len() != dist.dims() {
        return Err(DfmError::Shape(format!("state has {} dimensions, distribution has {}", xt.len(), dist.dims())));
    }
    flow.alphabet().check_sequence(xt)?;

    // kernel[x1 * n + xt] = p_{t|1}(xt | x1)
    let n = flow.alphabet().num_states();
    let mut kernel = Vec::with_capacity(s * n);
    for x1 in 0..s as Token {
        kernel.extend(flow.probs_row_unchecked(t, x1));
    }

    let dims = xt.len();
    let mut acc = vec![0.0; dims * s];
    let mut total = 0.0;
    for (x1, p) in dist.entries() {
        let mut w = *p;
        for (a, b) in x1.iter().zip(xt) {
            w *= kernel[*a as usize * n + *b as usize];
            if w == 0.0 {
                break;
            }
        }
        if w == 0.0 {
            continue;
        }
        total += w;
        for (d, &k) in x1.iter().enumerate() {
            acc[d * s + k as usize] += w;
        }
    }
    if !(total > 0.0) {
        return Err(DfmError::UnreachableState { t });
    }
    acc.iter_mut().for_each(|v| *v /= total);
    Ok(DenoiserOutput::from_flat_unchecked(acc, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::families;

    #[test]
    fn two_state_uniform_example() {
        let dist = TabularDistribution::new(2, 1, vec![(vec![0], 0.75), (vec![1], 0.25)]).unwrap();
        let flow = ConditionalFlow::uniform(2).unwrap();
        let out = exact_posterior(&dist, &flow, 0.5, &[0]).unwrap();
        assert!((out.row(0)[0] - 0.9).abs() < 1e-12);
        assert!((out.row(0)[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn masking_unmasked_dims_are_point_masses() {
        let dist = families::structured_toy();
        let flow = ConditionalFlow::masking(4).unwrap();
        let out = exact_posterior(&dist, &flow, 0.4, &[1, 4, 1]).unwrap();
        assert_eq!(out.row(0), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(out.row(2), &[0.0, 1.0, 0.0, 0.0]);
        let s: f64 = out.row(1).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn near_one_is_point_mass_on_xt() {
        let dist = families::structured_toy();
        for flow in [ConditionalFlow::masking(4).unwrap(), ConditionalFlow::uniform(4).unwrap()] {
            let out = exact_posterior(&dist, &flow, 1.0 - 1e-9, &[2, 2, 3]).unwrap();
            assert!((out.row(0)[2] - 1.0).abs() < 1e-6);
            assert!((out.row(2)[3] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn unreachable_state() {
        let dist = families::point_mass(3, vec![0, 1]).unwrap();
        let flow = ConditionalFlow::masking(3).unwrap();
        assert!(matches!(
            exact_posterior(&dist, &flow, 0.5, &[2, 3]),
            Err(DfmError::UnreachableState { .. })
        ));
        assert!(matches!(exact_posterior(&dist, &flow, 1.5, &[0, 1]), Err(DfmError::Domain(_))));
    }
}
