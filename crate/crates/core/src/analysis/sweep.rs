use std::io::{self, Write};

use crate::model::{ModelContext, ModelParams, Variant};
use crate::trainer::{eval_perplexity, EvalSettings, TrainError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub iters: usize,
    pub nll: f64,
    pub ppl: f64,
}

/// Drops repeated iteration counts, keeping first occurrences in order.
pub fn dedup_iters(iters: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(iters.len());
    for &r in iters {
        if !out.contains(&r) {
            out.push(r);
        }
    }
    out
}

/// Held-out perplexity at each iteration count.
///
/// A Std model only runs at r = 1 unless `force` loops its Body.
pub fn iteration_sweep(
    ctx: &ModelContext<f32>,
    params: &ModelParams<f32>,
    tokens: &[u32],
    seq_len: usize,
    iters: &[usize],
    settings: &EvalSettings,
    force: bool,
) -> Result<Vec<SweepRow>, TrainError> {
    let iters = dedup_iters(iters);
    if iters.is_empty() || iters.contains(&0) {
        return Err(TrainError::Config("iteration counts must be >= 1".into()));
    }
    if ctx.config.variant == Variant::Std && !force && iters.iter().any(|&r| r != 1) {
        return Err(TrainError::Config(
            "variant std only supports r = 1; pass force to loop its body".into(),
        ));
    }
    iters
        .into_iter()
        .map(|r| {
            let s = EvalSettings {
                iters: r,
                loop_std: force,
                ..*settings
            };
            let rep = eval_perplexity(ctx, params, tokens, seq_len, &s)?;
            Ok(SweepRow {
                iters: r,
                nll: rep.nll,
                ppl: rep.ppl,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> io::Result<()> {
    writeln!(w, "r,ppl")?;
    for r in rows {
        writeln!(w, "{},{}", r.iters, r.ppl)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    #[test]
    fn dedup_preserves_order() {
        assert_eq!(dedup_iters(&[4, 1, 4, 2, 1, 8]), vec![4, 1, 2, 8]);
    }

    #[test]
    fn sweep_rows_and_std_guard() {
        let tokens: Vec<u32> = (0..60).map(|i| (i * 5 % 11) as u32).collect();
        let c = ModelConfig::tiny(Variant::AbbieD);
        let ctx = ModelContext::new(&c).unwrap();
        let params = init_params(&c).unwrap();
        let rows = iteration_sweep(&ctx, &params, &tokens, 7, &[1, 2, 4, 8], &EvalSettings::new(1), false).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.ppl.is_finite()));

        let c = ModelConfig::tiny(Variant::Std);
        let ctx = ModelContext::new(&c).unwrap();
        let params = init_params(&c).unwrap();
        let s = EvalSettings::new(1);
        assert!(iteration_sweep(&ctx, &params, &tokens, 7, &[1, 2], &s, false).is_err());
        assert_eq!(
            iteration_sweep(&ctx, &params, &tokens, 7, &[1], &s, false)
                .unwrap()
                .len(),
            1
        );
        assert_eq!(
            iteration_sweep(&ctx, &params, &tokens, 7, &[1, 2], &s, true)
                .unwrap()
                .len(),
            2
        );
    }
}
