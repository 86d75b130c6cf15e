//! The assembled network: encoder, decoupled (or shared) feature decoder,
//! initial heads, and the query-reasoning cascade, plus binary checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Blocks, DecoderConfig, FeatureDecoder, InitialHeads, InitialPrediction};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::reasoning::{QueryReasoner, ReasoningConfig, StageVars};
use crate::taxonomy::Taxonomy;
use crate::tensor::{Arr, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub c_neck: usize,
    pub d: usize,
    /// Free thing proposals; stuff and part queries are one per class.
    pub thing_queries: usize,
    pub stages: usize,
    pub attn_heads: usize,
    /// Separate scene/part decoders; when false one decoder feeds both.
    pub decoupled: bool,
    pub aligned_part_decoder: bool,
    pub positional_encoding: bool,
    pub use_dynamic_conv: bool,
    pub use_self_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c_neck: 32,
            d: 32,
            thing_queries: 8,
            stages: 3,
            attn_heads: 4,
            decoupled: true,
            aligned_part_decoder: true,
            positional_encoding: true,
            use_dynamic_conv: true,
            use_self_attention: true,
        }
    }
}

/// Everything a loss or merger needs from one forward pass.
pub struct ForwardOutputs {
    pub f_s: Var,
    pub f_p: Var,
    pub init: InitialPrediction,
    pub stages: Vec<StageVars>,
    pub feat_hw: (usize, usize),
    pub input_hw: (usize, usize),
}

pub struct Model {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub scene_decoder: FeatureDecoder,
    pub part_decoder: Option<FeatureDecoder>,
    pub initial: InitialHeads,
    pub reasoner: QueryReasoner,
    pub cfg: ModelConfig,
    pub blocks: Blocks,
}

impl Model {
    /// Builds and initializes all parameters from `seed` (Xavier for linear
    /// and conv weights, zeros for biases and flow heads).
    pub fn new(cfg: &ModelConfig, tax: &Taxonomy, seed: u64) -> Result<Self> {
        if cfg.stages < 1 {
            return Err(Error::Config("model needs at least one stage".into()));
        }
        if cfg.d % cfg.attn_heads != 0 {
            return Err(Error::Config(format!(
                "attention heads {} must divide d {}",
                cfg.attn_heads, cfg.d
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(
            &mut store,
            &mut rng,
            EncoderConfig {
                c_neck: cfg.c_neck,
                ..EncoderConfig::default()
            },
        );
        let scene_decoder = FeatureDecoder::new(
            &mut store,
            &mut rng,
            "dec.scene",
            DecoderConfig {
                d: cfg.d,
                positional_encoding: cfg.positional_encoding,
                aligned: false,
            },
            cfg.c_neck,
        );
        let part_decoder = cfg.decoupled.then(|| {
            FeatureDecoder::new(
                &mut store,
                &mut rng,
                "dec.part",
                DecoderConfig {
                    d: cfg.d,
                    positional_encoding: cfg.positional_encoding,
                    aligned: cfg.aligned_part_decoder,
                },
                cfg.c_neck,
            )
        });
        let blocks = Blocks {
            n_thing: cfg.thing_queries,
            n_stuff: tax.n_stuff(),
            n_part: tax.n_parts(),
        };
        let initial = InitialHeads::new(&mut store, &mut rng, cfg.d, blocks);
        let reasoner = QueryReasoner::new(
            &mut store,
            &mut rng,
            ReasoningConfig {
                d: cfg.d,
                stages: cfg.stages,
                heads: cfg.attn_heads,
                use_dynamic_conv: cfg.use_dynamic_conv,
                use_self_attention: cfg.use_self_attention,
                n_thing_classes: tax.n_things(),
                n_stuff_classes: tax.n_stuff(),
                n_part_classes: tax.n_parts(),
            },
        );
        Ok(Model {
            store,
            encoder,
            scene_decoder,
            part_decoder,
            initial,
            reasoner,
            cfg: cfg.clone(),
            blocks,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn forward(&self, t: &Tape, image: &Array3<f64>) -> Result<ForwardOutputs> {
        let (_, h, w) = image.dim();
        let img = t.constant(image.clone().into_dyn());
        let ms = self.encoder.forward(t, &self.store, img)?;
        let f_s = self.scene_decoder.forward(t, &self.store, &ms);
        let f_p = match &self.part_decoder {
            Some(dec) => dec.forward(t, &self.store, &ms),
            None => f_s,
        };
        let init = self.initial.forward(t, &self.store, f_s, f_p);
        let feat_hw = init.feat_hw;
        let stages = self
            .reasoner
            .run(t, &self.store, &init, f_s, f_p, self.blocks);
        Ok(ForwardOutputs {
            f_s,
            f_p,
            init,
            stages,
            feat_hw,
            input_hw: (h, w),
        })
    }
}

// ---- checkpoints ----

const CKPT_MAGIC: &[u8; 6] = b"PPCKPT";
const CKPT_VERSION: u8 = 1;

/// Optimizer moment estimates saved alongside parameters.
#[derive(Debug)]
pub struct CheckpointState {
    pub step: u64,
    pub adam_m: Vec<Arr>,
    pub adam_v: Vec<Arr>,
}

fn write_arr(w: &mut impl Write, a: &Arr) -> Result<()> {
    w.write_all(&[a.ndim() as u8])?;
    for &d in a.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(a.len() * 8);
    for v in a.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_arr(r: &mut impl Read) -> Result<Arr> {
    let mut nd = [0u8; 1];
    r.read_exact(&mut nd)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    let mut shape = Vec::with_capacity(nd[0] as usize);
    for _ in 0..nd[0] {
        let mut d = [0u8; 4];
        r.read_exact(&mut d)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Arr::from_shape_vec(ndarray::IxDyn(&shape), data).unwrap())
}

/// Writes parameters, optimizer state, step count, and the config hash.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    store: &ParamStore,
    state: &CheckpointState,
    config_hash: &[u8; 32],
) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&[CKPT_VERSION])?;
    w.write_all(config_hash)?;
    w.write_all(&state.step.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        write_arr(&mut w, store.value(id))?;
    }
    for m in &state.adam_m {
        write_arr(&mut w, m)?;
    }
    for v in &state.adam_v {
        write_arr(&mut w, v)?;
    }
    Ok(())
}

/// Restores parameters into `store` and returns the optimizer state.
/// The stored config hash must match unless `ignore_hash` is set.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    store: &mut ParamStore,
    config_hash: &[u8; 32],
    ignore_hash: bool,
) -> Result<CheckpointState> {
    let f = std::fs::File::open(path.as_ref()).map_err(|e| {
        Error::Config(format!(
            "missing checkpoint {}: {e}",
            path.as_ref().display()
        ))
    })?;
    let mut r = std::io::BufReader::new(f);
    let mut head = [0u8; 7];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    if &head[0..6] != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    if head[6] != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", head[6])));
    }
    let mut stored_hash = [0u8; 32];
    r.read_exact(&mut stored_hash)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    if !ignore_hash && &stored_hash != config_hash {
        return Err(Error::Config(
            "checkpoint was produced by a different configuration (hash mismatch)".into(),
        ));
    }
    let mut step_b = [0u8; 8];
    r.read_exact(&mut step_b)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    let step = u64::from_le_bytes(step_b);
    let mut n_b = [0u8; 4];
    r.read_exact(&mut n_b)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    let n = u32::from_le_bytes(n_b) as usize;
    if n != store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {n} parameters, model has {}",
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let mut len_b = [0u8; 2];
        r.read_exact(&mut len_b)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let mut name = vec![0u8; u16::from_le_bytes(len_b) as usize];
        r.read_exact(&mut name)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let name = String::from_utf8_lossy(&name).into_owned();
        if name != store.name(id) {
            return Err(Error::Config(format!(
                "checkpoint parameter {name:?} does not match model parameter {:?}",
                store.name(id)
            )));
        }
        let arr = read_arr(&mut r)?;
        if arr.shape() != store.value(id).shape() {
            return Err(Error::Config(format!("checkpoint shape mismatch for {name:?}")));
        }
        store.set(id, arr);
    }
    let mut adam_m = Vec::with_capacity(n);
    for _ in 0..n {
        adam_m.push(read_arr(&mut r)?);
    }
    let mut adam_v = Vec::with_capacity(n);
    for _ in 0..n {
        adam_v.push(read_arr(&mut r)?);
    }
    Ok(CheckpointState {
        step,
        adam_m,
        adam_v,
    })
}
