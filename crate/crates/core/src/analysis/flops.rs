use std::io::{self, Write};

use crate::model::{ParamCounts, Variant};

/// Compute estimate for training or evaluating on `tokens` tokens.
///
/// `n_eff` counts the Body (and the Depth projection) once per iteration and
/// everything else once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopsReport {
    pub variant: Variant,
    pub iters: usize,
    pub tokens: u64,
    pub n_eff: u128,
    /// `2 · n_eff · tokens`.
    pub fwd_flops: u128,
    /// `6 · n_eff · tokens`.
    pub train_flops: u128,
    /// `n_eff` over the same counts run once as Std.
    pub efficiency: f64,
}

impl FlopsReport {
    pub fn fwd_flops_per_token(&self) -> u128 {
        2 * self.n_eff
    }
}

pub fn flops_estimate(counts: &ParamCounts, variant: Variant, iters: usize, tokens: u64) -> FlopsReport {
    let r = iters as u128;
    let once = counts.head as u128 + counts.tail as u128 + counts.embedding as u128;
    let n_eff = once + r * (counts.body as u128 + counts.depth_proj as u128);
    let std = once + counts.body as u128;
    let d = tokens as u128;
    FlopsReport {
        variant,
        iters,
        tokens,
        n_eff,
        fwd_flops: 2 * n_eff * d,
        train_flops: 6 * n_eff * d,
        efficiency: if std == 0 { 1.0 } else { n_eff as f64 / std as f64 },
    }
}

pub fn write_flops_csv<W: Write>(mut w: W, reports: &[FlopsReport]) -> io::Result<()> {
    writeln!(w, "variant,r,D,n_eff,fwd_flops,train_flops,efficiency")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.variant, r.iters, r.tokens, r.n_eff, r.fwd_flops, r.train_flops, r.efficiency
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{count_params, ModelConfig};
    use proptest::prelude::*;

    fn counts(head: u64, body: u64, tail: u64, embedding: u64) -> ParamCounts {
        ParamCounts {
            embedding,
            head,
            body,
            tail,
            depth_proj: 0,
        }
    }

    #[test]
    fn closed_form_example() {
        let c = counts(10, 20, 10, 0);
        let a = flops_estimate(&c, Variant::AbbieD, 2, 1000);
        assert_eq!(a.n_eff, 60);
        assert_eq!(a.train_flops, 360_000);
        assert_eq!(a.fwd_flops, 120_000);
        let s = flops_estimate(&c, Variant::Std, 1, 1000);
        assert_eq!(s.n_eff, 40);
        assert_eq!(a.efficiency, 1.5);
        assert_eq!(flops_estimate(&c, Variant::AbbieC, 1, 1000).efficiency, 1.0);
    }

    #[test]
    fn large_reference_config_costs_more_than_std() {
        let c = ModelConfig::reference_350m(Variant::AbbieD);
        let rep = flops_estimate(&count_params(&c), Variant::AbbieD, 2, 4_000_000_000);
        assert!(rep.efficiency > 1.0);
        assert!(rep.train_flops > u64::MAX as u128 / 1000);
    }

    #[test]
    fn depth_projection_counts_per_iteration() {
        let mut c = counts(10, 20, 10, 5);
        c.depth_proj = 4;
        assert_eq!(flops_estimate(&c, Variant::Depth, 3, 1).n_eff, 10 + 10 + 5 + 3 * 24);
    }

    proptest! {
        #[test]
        fn linear_in_tokens_affine_in_iters(
            h in 0u64..1_000_000, b in 1u64..1_000_000, t in 0u64..1_000_000, e in 0u64..1_000_000,
            r in 1usize..16, d in 0u64..1_000_000_000,
        ) {
            let c = counts(h, b, t, e);
            let one = flops_estimate(&c, Variant::AbbieD, r, d);
            let two = flops_estimate(&c, Variant::AbbieD, r, 2 * d);
            prop_assert_eq!(two.train_flops, 2 * one.train_flops);
            let next = flops_estimate(&c, Variant::AbbieD, r + 1, d);
            prop_assert_eq!(next.n_eff - one.n_eff, b as u128);
            prop_assert!(one.efficiency >= 1.0);
            prop_assert_eq!(flops_estimate(&c, Variant::Std, 1, d).efficiency, 1.0);
        }
    }
}
