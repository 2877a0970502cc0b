//! MCMC infrastructure: chain configuration, the kernel abstraction, the
//! parallel chain runner and convergence diagnostics.

pub mod dist;
pub mod rhat;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream_rng, SimRng, Stream};

pub use dist::{
    sample_gig, sample_gig_half, sample_inverse_gaussian, sample_mvn_precision,
};
pub use rhat::{rhat, Rhat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub n_chains: usize,
    pub burn_in: usize,
    pub kept: usize,
    pub thin: usize,
    pub seed: u64,
    pub rhat_threshold: f64,
    /// Compute R-hat for every coefficient (requires `n_chains >= 2`).
    pub compute_rhat: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            burn_in: 2000,
            kept: 2000,
            thin: 1,
            seed: 1,
            rhat_threshold: 1.1,
            compute_rhat: true,
        }
    }
}

impl ChainConfig {
    pub fn retained(&self) -> usize {
        self.kept / self.thin.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_chains < 1 {
            return Err(Error::InvalidParameter("n_chains must be >= 1".into()));
        }
        if self.thin < 1 {
            return Err(Error::InvalidParameter("thin must be >= 1".into()));
        }
        if self.retained() < 100 {
            return Err(Error::InvalidParameter(format!(
                "kept/thin = {} retained draws per chain; need >= 100",
                self.retained()
            )));
        }
        if self.compute_rhat && self.n_chains < 2 {
            return Err(Error::InvalidParameter(
                "R-hat requested but n_chains < 2".into(),
            ));
        }
        if !(self.rhat_threshold >= 1.0) {
            return Err(Error::InvalidParameter("rhat_threshold must be >= 1".into()));
        }
        Ok(())
    }
}

/// Retained draws of one named parameter block in one chain, stored
/// draw-major: `values[draw * width + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub name: String,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Trace {
    pub fn new(name: &str, width: usize) -> Self {
        Self {
            name: name.to_string(),
            width,
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.values.len() / self.width
        }
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn draw(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    /// All draws of component `k`.
    pub fn component(&self, k: usize) -> Vec<f64> {
        self.values.iter().skip(k).step_by(self.width).copied().collect()
    }
}

/// The traces of one chain.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceSet {
    pub traces: Vec<Trace>,
}

impl TraceSet {
    pub fn get(&self, name: &str) -> Option<&Trace> {
        self.traces.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Trace> {
        self.traces.iter_mut().find(|t| t.name == name)
    }
}

/// One Gibbs-style transition kernel.
pub trait Kernel: Sync {
    type State: Send;

    fn init(&self, rng: &mut SimRng) -> Result<Self::State>;

    /// One full sweep.
    fn step(&self, state: &mut Self::State, rng: &mut SimRng) -> Result<()>;

    /// Names and widths of the recorded blocks.
    fn layout(&self) -> Vec<(String, usize)>;

    /// Appends the current values of every block, in `layout` order.
    fn record(&self, state: &Self::State, traces: &mut [Trace]);
}

fn check_finite(traces: &[Trace], iteration: usize) -> Result<()> {
    for t in traces {
        let tail = &t.values[t.values.len() - t.width..];
        if let Some(k) = tail.iter().position(|v| !v.is_finite()) {
            let parameter = if t.width == 1 {
                t.name.clone()
            } else {
                format!("{}[{k}]", t.name)
            };
            return Err(Error::NonFinite {
                parameter,
                iteration,
            });
        }
    }
    Ok(())
}

fn run_one<K: Kernel>(kernel: &K, cfg: &ChainConfig, chain: usize) -> Result<TraceSet> {
    let mut rng = substream_rng(cfg.seed, Stream::Chain, chain as u64);
    let mut state = kernel.init(&mut rng)?;
    let layout = kernel.layout();
    let mut scratch: Vec<Trace> = layout.iter().map(|(n, w)| Trace::new(n, *w)).collect();
    let mut kept: Vec<Trace> = layout
        .iter()
        .map(|(n, w)| {
            let mut t = Trace::new(n, *w);
            t.values.reserve(w * cfg.retained());
            t
        })
        .collect();
    let total = cfg.burn_in + cfg.kept;
    for it in 0..total {
        kernel.step(&mut state, &mut rng)?;
        for t in scratch.iter_mut() {
            t.values.clear();
        }
        kernel.record(&state, &mut scratch);
        check_finite(&scratch, it)?;
        let post = it + 1 - cfg.burn_in.min(it + 1);
        if it >= cfg.burn_in && post.is_multiple_of(cfg.thin) && kept[0].len() < cfg.retained() {
            for (k, s) in kept.iter_mut().zip(&scratch) {
                k.values.extend_from_slice(&s.values);
            }
        }
    }
    Ok(TraceSet { traces: kept })
}

/// Runs `cfg.n_chains` independent chains of `kernel`. Chains run in
/// parallel on the current rayon pool; each owns its RNG substream and the
/// output is ordered by chain index, so results do not depend on the
/// thread count.
pub fn run_chains<K: Kernel>(kernel: &K, cfg: &ChainConfig) -> Result<Vec<TraceSet>> {
    cfg.validate()?;
    (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| run_one(kernel, cfg, c))
        .collect()
}

/// Split R-hat for every component of the named trace across chains.
pub fn rhat_per_component(chains: &[TraceSet], name: &str) -> Result<Vec<Rhat>> {
    let traces: Vec<&Trace> = chains
        .iter()
        .map(|c| c.get(name).ok_or_else(|| Error::InvalidParameter(format!("no trace `{name}`"))))
        .collect::<Result<_>>()?;
    let width = traces[0].width;
    (0..width)
        .map(|k| {
            let comps: Vec<Vec<f64>> = traces.iter().map(|t| t.component(k)).collect();
            let refs: Vec<&[f64]> = comps.iter().map(|c| c.as_slice()).collect();
            rhat(&refs)
        })
        .collect()
}

/// Writes one CSV per trace family with columns `chain,iter,index,value`.
pub fn dump_traces(chains: &[TraceSet], dir: &Path, prefix: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let Some(first) = chains.first() else {
        return Ok(());
    };
    for t0 in &first.traces {
        let path = dir.join(format!("{prefix}{}.csv", t0.name));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(&path, e);
        writeln!(w, "chain,iter,index,value").map_err(io)?;
        for (c, set) in chains.iter().enumerate() {
            let t = set.get(&t0.name).expect("same layout in every chain");
            for i in 0..t.len() {
                for (k, v) in t.draw(i).iter().enumerate() {
                    writeln!(w, "{c},{i},{k},{}", crate::data::fmt_f64(*v)).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)?;
    }
    Ok(())
}
