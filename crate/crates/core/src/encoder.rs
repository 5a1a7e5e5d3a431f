//! Scene tokenizer and set transformer producing the driving-context vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_weight, AttentionLayout, ParamId, ParamStore, Tape, Tensor, Var};
use crate::sim::geometry::wrap_angle;
use crate::sim::{SceneObservation, SimConfig};

pub const TOKEN_PARTICIPANT: u8 = 1;
pub const TOKEN_TRAJECTORY: u8 = 2;

/// Number of token attributes without the optional velocity attribute.
pub const BASE_ATTRIBUTES: usize = 6;

/// One scene element in the ego frame. Positions and sizes are divided by
/// the perception radius.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectToken {
    pub z: u8,
    pub x: f64,
    pub y: f64,
    pub phi: f64,
    pub w: f64,
    pub h: f64,
    /// Speed over `v_max`; only fed to the encoder when `token_velocity` is set.
    pub speed: f64,
}

impl ObjectToken {
    fn push_attributes(&self, out: &mut Vec<f64>, with_velocity: bool) {
        out.extend_from_slice(&[f64::from(self.z), self.x, self.y, self.phi, self.w, self.h]);
        if with_velocity {
            out.push(self.speed);
        }
    }
}

/// Participants sorted by distance to the ego, then route points in order.
pub fn tokenize(obs: &SceneObservation, cfg: &SimConfig) -> Vec<ObjectToken> {
    let r = cfg.perception_radius;
    let ego = &obs.ego;
    let (sin_h, cos_h) = ego.heading.sin_cos();
    let local = |x: f64, y: f64| {
        let (dx, dy) = (x - ego.x, y - ego.y);
        let lx = (dx * cos_h + dy * sin_h).clamp(-r, r);
        let ly = (-dx * sin_h + dy * cos_h).clamp(-r, r);
        (lx / r, ly / r)
    };

    let mut participants: Vec<(f64, ObjectToken)> = obs
        .participants
        .iter()
        .map(|p| {
            let (x, y) = local(p.x, p.y);
            let token = ObjectToken {
                z: TOKEN_PARTICIPANT,
                x,
                y,
                phi: wrap_angle(p.heading - ego.heading),
                w: p.width / r,
                h: p.length / r,
                speed: p.speed / cfg.v_max,
            };
            ((p.x - ego.x).hypot(p.y - ego.y), token)
        })
        .collect();
    participants.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut tokens: Vec<ObjectToken> = participants.into_iter().map(|(_, t)| t).collect();
    tokens.extend(obs.route_lookahead.iter().map(|p| {
        let (x, y) = local(p.x, p.y);
        ObjectToken {
            z: TOKEN_TRAJECTORY,
            x,
            y,
            phi: wrap_angle(p.heading - ego.heading),
            w: 0.0,
            h: 0.0,
            speed: ego.speed / cfg.v_max,
        }
    }));
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub token_velocity: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            token_velocity: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err("encoder sizes must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return Err(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.hidden < 2 {
            return Err("hidden size must be at least 2".into());
        }
        Ok(())
    }

    pub fn attributes(&self) -> usize {
        BASE_ATTRIBUTES + usize::from(self.token_velocity)
    }

    /// Flattens tokens into a `tokens x attributes` row-major matrix.
    pub fn token_matrix(&self, tokens: &[ObjectToken]) -> Vec<f64> {
        let mut out = Vec::with_capacity(tokens.len() * self.attributes());
        for t in tokens {
            t.push_attributes(&mut out, self.token_velocity);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln1: (ParamId, ParamId),
    query: (ParamId, ParamId),
    key: (ParamId, ParamId),
    value: (ParamId, ParamId),
    out: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

/// Pre-norm transformer over an unordered token set with a learned CLS token.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    proj: (ParamId, ParamId),
    cls: ParamId,
    blocks: Vec<Block>,
    ln_final: (ParamId, ParamId),
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

const PREFIX: &str = "encoder";

impl Encoder {
    pub fn new(store: &mut ParamStore, config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate().map_err(Error::Config)?;
        let h = config.hidden;
        let f = h * config.ffn_mult;
        let mut linear = |store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| {
            let w = store.add(format!("{PREFIX}.{name}.weight"), init_weight(rng, fan_in, fan_out));
            let b = store.add(format!("{PREFIX}.{name}.bias"), Tensor::zeros(vec![fan_out]));
            (w, b)
        };
        let norm = |store: &mut ParamStore, name: &str| {
            let g = Tensor::new(vec![h], vec![1.0; h]).expect("finite");
            (
                store.add(format!("{PREFIX}.{name}.gain"), g),
                store.add(format!("{PREFIX}.{name}.bias"), Tensor::zeros(vec![h])),
            )
        };

        let proj = linear(store, "proj", config.attributes(), h);
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            blocks.push(Block {
                ln1: norm(store, &format!("block{l}.ln1")),
                query: linear(store, &format!("block{l}.query"), h, h),
                key: linear(store, &format!("block{l}.key"), h, h),
                value: linear(store, &format!("block{l}.value"), h, h),
                out: linear(store, &format!("block{l}.out"), h, h),
                ln2: norm(store, &format!("block{l}.ln2")),
                ff1: linear(store, &format!("block{l}.ff1"), h, f),
                ff2: linear(store, &format!("block{l}.ff2"), f, h),
            });
        }
        let ln_final = norm(store, "ln_final");
        let cls_values = (0..h).map(|_| 0.02 * standard_normal(rng)).collect();
        let cls = store.add(format!("{PREFIX}.cls"), Tensor::new(vec![1, h], cls_values)?);
        Ok(Self {
            config: config.clone(),
            proj,
            cls,
            blocks,
            ln_final,
        })
    }

    /// Rebinds to encoder parameters already present in `store`.
    pub fn bind(store: &ParamStore, config: &EncoderConfig) -> Result<Self> {
        config.validate().map_err(Error::Config)?;
        let h = config.hidden;
        let f = h * config.ffn_mult;
        let missing = |name: String| Error::format("weights", format!("missing or misshapen `{name}`"));
        let find = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = store.find(&name).ok_or_else(|| missing(name.clone()))?;
            if store.get(id).shape() != shape {
                return Err(missing(name));
            }
            Ok(id)
        };
        let linear = |name: &str, fan_in: usize, fan_out: usize| -> Result<(ParamId, ParamId)> {
            Ok((
                find(format!("{PREFIX}.{name}.weight"), &[fan_in, fan_out])?,
                find(format!("{PREFIX}.{name}.bias"), &[fan_out])?,
            ))
        };
        let norm = |name: &str| -> Result<(ParamId, ParamId)> {
            Ok((
                find(format!("{PREFIX}.{name}.gain"), &[h])?,
                find(format!("{PREFIX}.{name}.bias"), &[h])?,
            ))
        };
        let proj = linear("proj", config.attributes(), h)?;
        let blocks = (0..config.layers)
            .map(|l| {
                Ok(Block {
                    ln1: norm(&format!("block{l}.ln1"))?,
                    query: linear(&format!("block{l}.query"), h, h)?,
                    key: linear(&format!("block{l}.key"), h, h)?,
                    value: linear(&format!("block{l}.value"), h, h)?,
                    out: linear(&format!("block{l}.out"), h, h)?,
                    ln2: norm(&format!("block{l}.ln2"))?,
                    ff1: linear(&format!("block{l}.ff1"), h, f)?,
                    ff2: linear(&format!("block{l}.ff2"), f, h)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            proj,
            cls: find(format!("{PREFIX}.cls"), &[1, h])?,
            blocks,
            ln_final: norm("ln_final")?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.proj.0, self.proj.1, self.cls];
        for b in &self.blocks {
            for (p, q) in [b.ln1, b.query, b.key, b.value, b.out, b.ln2, b.ff1, b.ff2] {
                ids.push(p);
                ids.push(q);
            }
        }
        ids.push(self.ln_final.0);
        ids.push(self.ln_final.1);
        ids
    }

    /// Forward pass over a batch of token sets stacked into one
    /// `tokens x attributes` input node; `lengths` gives the token count of
    /// each set. Returns one `1 x H` CLS representation per set, as a
    /// `sets x H` node.
    ///
    /// Only the CLS rows of the last block are read, so that block computes
    /// queries and the feed-forward path for those rows alone.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        tokens: Var,
        lengths: &[usize],
    ) -> Result<Var> {
        let total: usize = lengths.iter().sum();
        if lengths.is_empty() || lengths.contains(&0) || tape.shape(tokens).0 != total {
            return Err(Error::shape(
                "encode",
                format!("{} token rows for set sizes {lengths:?}", tape.shape(tokens).0),
            ));
        }
        let affine = |tape: &mut Tape<'a>, x: Var, (w, b): (ParamId, ParamId)| -> Result<Var> {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let z = tape.matmul(x, wv)?;
            tape.add_row(z, bv)
        };
        let norm = |tape: &mut Tape<'a>, x: Var, (g, b): (ParamId, ParamId)| -> Result<Var> {
            let gv = tape.param(store, g);
            let bv = tape.param(store, b);
            tape.layer_norm(x, gv, bv)
        };

        // Row 0 of `pool` is the CLS token, followed by all embedded tokens.
        // Each set becomes [CLS, its tokens...].
        let embedded = affine(tape, tokens, self.proj)?;
        let cls = tape.param(store, self.cls);
        let pool = tape.concat_rows(&[cls, embedded])?;
        let mut gather = Vec::with_capacity(total + lengths.len());
        let mut kv_offsets = vec![0];
        let mut next = 1;
        for &n in lengths {
            gather.push(0);
            gather.extend(next..next + n);
            next += n;
            kv_offsets.push(gather.len());
        }
        let cls_rows: Vec<usize> = kv_offsets[..lengths.len()].to_vec();
        let mut x = tape.select_rows(pool, &gather)?;

        for (l, block) in self.blocks.iter().enumerate() {
            let last = l + 1 == self.blocks.len();
            let normed = norm(tape, x, block.ln1)?;
            let keys = affine(tape, normed, block.key)?;
            let values = affine(tape, normed, block.value)?;
            let (query_src, residual, q_offsets) = if last {
                (
                    tape.select_rows(normed, &cls_rows)?,
                    tape.select_rows(x, &cls_rows)?,
                    (0..=lengths.len()).collect(),
                )
            } else {
                (normed, x, kv_offsets.clone())
            };
            let queries = affine(tape, query_src, block.query)?;
            let layout = AttentionLayout {
                q_offsets,
                kv_offsets: kv_offsets.clone(),
                heads: self.config.heads,
            };
            let attended = tape.segment_attention(queries, keys, values, layout)?;
            let projected = affine(tape, attended, block.out)?;
            let x1 = tape.add(residual, projected)?;

            let normed = norm(tape, x1, block.ln2)?;
            let hidden = affine(tape, normed, block.ff1)?;
            let hidden = tape.gelu(hidden)?;
            let ff = affine(tape, hidden, block.ff2)?;
            x = tape.add(x1, ff)?;
        }
        norm(tape, x, self.ln_final)
    }

    /// Context vector for one token set.
    pub fn encode(&self, store: &ParamStore, tokens: &[ObjectToken]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::shape("encode", "no tokens"));
        }
        let mut tape = Tape::new();
        let input = tape.input(
            tokens.len(),
            self.config.attributes(),
            self.config.token_matrix(tokens),
        )?;
        let out = self.forward(&mut tape, store, input, &[tokens.len()])?;
        Ok(tape.value(out).to_vec())
    }
}
