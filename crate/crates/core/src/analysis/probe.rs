use std::io::{self, Write};

use crate::model::{body_iterate, head_forward, DepthInit, ForwardOptions, ModelContext, ModelParams};
use crate::tensor::Graph;
use crate::trainer::TrainError;

/// Distance between Body states `k` and `k + 1` for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRow {
    pub sample_id: usize,
    pub k: usize,
    pub abs_dist: f64,
    pub rel_dist: f64,
}

/// Iterates the Body `r_max` times on each sample and reports the
/// token-averaged distance between consecutive states.
///
/// Std models are looped like AbbIE-C so their Body can be probed too.
pub fn fixed_point_probe(
    ctx: &ModelContext<f32>,
    params: &ModelParams<f32>,
    samples: &[&[u32]],
    r_max: usize,
    depth_seed: u64,
) -> Result<Vec<ProbeRow>, TrainError> {
    if r_max < 2 {
        return Err(TrainError::Config(format!("probe needs r_max >= 2, got {r_max}")));
    }
    let mut rows = Vec::with_capacity(samples.len() * r_max);
    for (sample_id, tokens) in samples.iter().enumerate() {
        let g = Graph::inference();
        let p = params.bind(&g, false);
        let h0 = head_forward(ctx, &p, tokens, 1, None)?;
        let mut opts = ForwardOptions {
            iters: r_max,
            capture_trace: true,
            depth_init: DepthInit::Seed(depth_seed),
            loop_std: true,
        };
        let (_, trace) = body_iterate(ctx, &p, h0, &mut opts)?;
        let trace = trace.expect("trace requested");
        for (k, (&abs_dist, &rel_dist)) in trace.abs.iter().zip(&trace.rel).enumerate() {
            rows.push(ProbeRow {
                sample_id,
                k,
                abs_dist,
                rel_dist,
            });
        }
    }
    Ok(rows)
}

pub fn write_probe_csv<W: Write>(mut w: W, rows: &[ProbeRow]) -> io::Result<()> {
    writeln!(w, "sample_id,k,abs_dist,rel_dist")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.sample_id, r.k, r.abs_dist, r.rel_dist)?;
    }
    Ok(())
}
