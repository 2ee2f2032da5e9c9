//! Checkpoint container: the magic `JAGANCKPT1`, a little-endian `u64`
//! header length, a JSON header, then every tensor as raw little-endian
//! `f64` values in header order.

use std::path::Path;

use jagan_core::losses::LossWeights;
use jagan_core::nets::NetConfig;
use jagan_core::nn::ParamStore;
use jagan_core::optim::AdamState;
use jagan_core::rng::RngState;
use jagan_core::trainer::{Checkpoint, EvalRecord, GeneratorState, TrainConfig};
use jagan_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const MAGIC: &[u8; 10] = b"JAGANCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    step: u64,
    net: NetConfig,
    train: TrainConfig,
    loss: LossWeights,
    rng: RngState,
    best_metric: Option<f64>,
    best_step: Option<u64>,
    stagnant_evals: usize,
    evals: Vec<EvalRecord>,
    adam_g_t: u64,
    adam_d_t: u64,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: [usize; 4],
}

const GROUPS: [&str; 9] = [
    "generator",
    "generator_buffers",
    "discriminator",
    "adam_g.m",
    "adam_g.v",
    "adam_d.m",
    "adam_d.v",
    "best_generator",
    "best_generator_buffers",
];

fn named(store: &ParamStore) -> Vec<(&str, &Tensor)> {
    store.iter().collect()
}

fn moments<'a>(store: &'a ParamStore, m: &'a [Tensor]) -> Vec<(&'a str, &'a Tensor)> {
    store.names().iter().map(String::as_str).zip(m).collect()
}

fn groups(c: &Checkpoint) -> Vec<(&'static str, Vec<(&str, &Tensor)>)> {
    let mut out = vec![
        (GROUPS[0], named(&c.generator.params)),
        (GROUPS[1], named(&c.generator.buffers)),
        (GROUPS[2], named(&c.discriminator)),
        (GROUPS[3], moments(&c.generator.params, &c.adam_g.m)),
        (GROUPS[4], moments(&c.generator.params, &c.adam_g.v)),
        (GROUPS[5], moments(&c.discriminator, &c.adam_d.m)),
        (GROUPS[6], moments(&c.discriminator, &c.adam_d.v)),
    ];
    if let Some(best) = &c.best_generator {
        out.push((GROUPS[7], named(&best.params)));
        out.push((GROUPS[8], named(&best.buffers)));
    }
    out
}

pub fn to_bytes(c: &Checkpoint) -> Vec<u8> {
    let groups = groups(c);
    let tensors = groups
        .iter()
        .flat_map(|(g, items)| {
            items.iter().map(|(n, t)| Entry {
                group: g.to_string(),
                name: n.to_string(),
                shape: t.shape(),
            })
        })
        .collect();
    let header = Header {
        version: FORMAT_VERSION,
        step: c.step,
        net: c.net.clone(),
        train: c.train.clone(),
        loss: c.loss.clone(),
        rng: c.rng,
        best_metric: c.best_metric,
        best_step: c.best_step,
        stagnant_evals: c.stagnant_evals,
        evals: c.evals.clone(),
        adam_g_t: c.adam_g.t,
        adam_d_t: c.adam_d.t,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, items) in &groups {
        for (_, t) in items {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |reason: String| Error::Checkpoint {
        path: path.into(),
        reason,
    };
    let rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| bad("missing JAGANCKPT1 magic".into()))?;
    if rest.len() < 8 {
        return Err(bad("truncated header".into()));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
    let rest = &rest[8..];
    if rest.len() < len {
        return Err(bad("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&rest[..len]).map_err(|e| bad(format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {}",
            header.version
        )));
    }
    let mut data = &rest[len..];
    let mut stores: Vec<ParamStore> = GROUPS.iter().map(|_| ParamStore::new()).collect();
    for e in &header.tensors {
        let gi = GROUPS
            .iter()
            .position(|g| *g == e.group)
            .ok_or_else(|| bad(format!("unknown group {}", e.group)))?;
        let n: usize = e.shape.iter().product();
        if data.len() < 8 * n {
            return Err(bad("truncated tensor data".into()));
        }
        let values = data[..8 * n]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        data = &data[8 * n..];
        stores[gi].add(&e.name, Tensor::from_vec(e.shape, values));
    }
    if !data.is_empty() {
        return Err(bad(format!("{} trailing bytes", data.len())));
    }
    let mut stores = stores.into_iter();
    let mut next = || stores.next().unwrap();
    let (generator, generator_buffers, discriminator) = (next(), next(), next());
    let moments = |s: ParamStore, of: &ParamStore| -> Result<Vec<Tensor>> {
        if s.names() != of.names() {
            return Err(bad("optimizer moments do not match the parameters".into()));
        }
        Ok(s.values().to_vec())
    };
    let adam_g = AdamState {
        t: header.adam_g_t,
        m: moments(next(), &generator)?,
        v: moments(next(), &generator)?,
    };
    let adam_d = AdamState {
        t: header.adam_d_t,
        m: moments(next(), &discriminator)?,
        v: moments(next(), &discriminator)?,
    };
    let (best, best_buffers) = (next(), next());
    let best_generator = (!best.is_empty()).then_some(GeneratorState {
        params: best,
        buffers: best_buffers,
    });
    Ok(Checkpoint {
        step: header.step,
        net: header.net,
        train: header.train,
        loss: header.loss,
        generator: GeneratorState {
            params: generator,
            buffers: generator_buffers,
        },
        discriminator,
        adam_g,
        adam_d,
        rng: header.rng,
        best_metric: header.best_metric,
        best_step: header.best_step,
        best_generator,
        stagnant_evals: header.stagnant_evals,
        evals: header.evals,
    })
}

/// Writes atomically: readers see the previous file or the complete new one.
pub fn save(path: &Path, c: &Checkpoint) -> Result<()> {
    io::write_atomic(path, &to_bytes(c))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
