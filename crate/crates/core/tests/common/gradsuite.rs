//! Finite-difference checks over every loss and layer type, on small random instances.

use l2c_core::encoders::{
    Adaptor, AdaptorConfig, AdaptorKind, AttentionMode, Dropout, LayerNorm, Linear, LoraConfig,
    LoraTarget, Pooling, TextEncoder, TextEncoderConfig, VisionEncoder, VisionEncoderConfig,
};
use l2c_core::losses::{
    info_nce_symmetric, mntp_loss_masked, mntp_select, simcse_supervised, simcse_unsupervised,
    stage2_loss, LogitScale, Stage2Embeddings, Stage2Method, Stage2Weights,
};
use l2c_core::numerics::gradcheck::gradcheck;
use l2c_core::numerics::{Module, Param, Rng, Segment, Tape, Var};
use l2c_core::tokens::{encode_caption, TokenBatch, N_RESERVED};
use l2c_core::Result;

pub const INSTANCES: usize = 20;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl CaseResult {
    pub fn ok(&self) -> bool {
        self.instances >= INSTANCES && self.max_rel_err <= TOLERANCE
    }
}

/// Parameter owners that can sit in a test harness struct.
trait Parts {
    fn parts(&self) -> Vec<&Param>;
    fn parts_mut(&mut self) -> Vec<&mut Param>;
}

impl Parts for Param {
    fn parts(&self) -> Vec<&Param> {
        vec![self]
    }
    fn parts_mut(&mut self) -> Vec<&mut Param> {
        vec![self]
    }
}

impl Parts for Linear {
    fn parts(&self) -> Vec<&Param> {
        self.params()
    }
    fn parts_mut(&mut self) -> Vec<&mut Param> {
        self.params_mut()
    }
}

impl Parts for LayerNorm {
    fn parts(&self) -> Vec<&Param> {
        self.params()
    }
    fn parts_mut(&mut self) -> Vec<&mut Param> {
        self.params_mut()
    }
}

impl Parts for LogitScale {
    fn parts(&self) -> Vec<&Param> {
        vec![&self.log_scale]
    }
    fn parts_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.log_scale]
    }
}

macro_rules! module_parts {
    ($($t:ty),*) => {$(
        impl Parts for $t {
            fn parts(&self) -> Vec<&Param> {
                self.params()
            }
            fn parts_mut(&mut self) -> Vec<&mut Param> {
                self.params_mut()
            }
        }
    )*};
}

module_parts!(TextEncoder, Adaptor, VisionEncoder);

impl<T: Parts> Parts for Option<T> {
    fn parts(&self) -> Vec<&Param> {
        self.iter().flat_map(|t| t.parts()).collect()
    }
    fn parts_mut(&mut self) -> Vec<&mut Param> {
        self.iter_mut().flat_map(|t| t.parts_mut()).collect()
    }
}

macro_rules! harness {
    ($name:ident { $($f:ident : $t:ty),* $(,)? }) => {
        struct $name { $($f: $t),* }
        impl Module for $name {
            fn params(&self) -> Vec<&Param> {
                let mut v = Vec::new();
                $(v.extend(self.$f.parts());)*
                v
            }
            fn params_mut(&mut self) -> Vec<&mut Param> {
                let mut v = Vec::new();
                $(v.extend(self.$f.parts_mut());)*
                v
            }
        }
    };
}

harness!(Pair {
    a: Param,
    b: Param,
    scale: LogitScale
});
harness!(Unsup { enc: TextEncoder, head: Option<Adaptor>, scale: LogitScale });
harness!(Enc { enc: TextEncoder });
harness!(Stage2 {
    llm: Param,
    clip: Param,
    vision: Param,
    wide: Param,
    concat: Linear,
    scale: LogitScale
});
harness!(LinearCase {
    lin: Linear,
    x: Param
});
harness!(LnCase {
    ln: LayerNorm,
    x: Param
});
harness!(Qkv {
    q: Param,
    k: Param,
    v: Param
});
harness!(OpsCase { x: Param, y: Param });
harness!(AdaptorCase {
    enc: TextEncoder,
    adaptor: Adaptor
});
harness!(PooledAdaptor {
    adaptor: Adaptor,
    x: Param
});
harness!(VisionCase {
    vision: VisionEncoder,
    x: Param
});

fn mat(name: &str, r: usize, c: usize, rng: &mut Rng) -> Param {
    Param::normal(name, &[r, c], 1.0, rng)
}

fn jitter(p: &mut Param, std: f64, rng: &mut Rng) {
    p.value
        .data_mut()
        .iter_mut()
        .for_each(|v| *v += std * rng.normal());
}

/// Random constant projection, turning any tensor output into a scalar loss.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut r = Rng::new(seed);
    let w: Vec<f64> = (0..tape.value(x).len()).map(|_| r.normal()).collect();
    let y = tape.mul_const(x, w)?;
    Ok(tape.sum(y))
}

fn scale_in(rng: &mut Rng) -> LogitScale {
    LogitScale::fixed("scale", rng.uniform_in(1.0, 20.0))
}

fn tiny_text(rng: &mut Rng) -> TextEncoderConfig {
    TextEncoderConfig {
        vocab_size: 12,
        max_len: 6,
        d_model: 8,
        n_layers: 1 + rng.below(2),
        n_heads: 1 + rng.below(2),
        ffn_mult: 2,
        attention_mode: if rng.bernoulli(0.5) {
            AttentionMode::Causal
        } else {
            AttentionMode::Bidirectional
        },
        pooling: if rng.bernoulli(0.5) {
            Pooling::Avg
        } else {
            Pooling::Eos
        },
        dropout_rate: 0.1,
        positional_init_std: 1.0,
        lora: None,
    }
}

fn random_batch(cfg: &TextEncoderConfig, rows: usize, rng: &mut Rng) -> TokenBatch {
    let seqs: Vec<Vec<u32>> = (0..rows)
        .map(|_| {
            let n = 1 + rng.below(cfg.max_len - 2);
            let content: Vec<u32> = (0..n)
                .map(|_| N_RESERVED + rng.below(cfg.vocab_size - N_RESERVED as usize) as u32)
                .collect();
            encode_caption(&content, rng.bernoulli(0.5), cfg.max_len)
        })
        .collect();
    TokenBatch::from_sequences(&seqs)
}

fn random_segments(total: usize, rng: &mut Rng) -> Vec<Segment> {
    let mut segs = Vec::new();
    let mut start = 0;
    while start < total {
        let len = (1 + rng.below(4)).min(total - start);
        segs.push(Segment { start, len });
        start += len;
    }
    segs
}

fn encoder(cfg: TextEncoderConfig, rng: &mut Rng) -> TextEncoder {
    let mut enc = TextEncoder::new("enc", cfg, rng).expect("valid config");
    // fresh LayerNorm gains and zero biases hide mistakes in their gradients
    for p in enc.params_mut() {
        if p.name.ends_with(".g") || p.name.ends_with(".b") {
            jitter(p, 0.3, rng);
        }
    }
    enc
}

fn run_case(
    name: &'static str,
    mut one: impl FnMut(&mut Rng, u64) -> Result<l2c_core::numerics::gradcheck::GradCheckReport>,
) -> CaseResult {
    let mut out = CaseResult {
        name,
        instances: 0,
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for i in 0..INSTANCES {
        let seed = 0x5eed_0000 + i as u64;
        let mut rng = Rng::new(seed);
        let r = match one(&mut rng, seed) {
            Ok(r) => r,
            Err(e) => {
                out.max_rel_err = f64::INFINITY;
                out.worst = format!("instance {i}: {e}");
                continue;
            }
        };
        out.instances += 1;
        out.checked += r.checked;
        if r.max_rel_err > out.max_rel_err || out.worst.is_empty() {
            out.max_rel_err = out.max_rel_err.max(r.max_rel_err);
            if let Some((p, k)) = r.worst {
                let (a, n) = r.worst_pair;
                out.worst = format!("instance {i}: {p}[{k}] analytic {a:.6e} numeric {n:.6e}");
            }
        }
    }
    out
}

pub fn info_nce() -> CaseResult {
    run_case("info_nce", |rng, _| {
        let (n, d) = (2 + rng.below(5), 2 + rng.below(6));
        let mut m = Pair {
            a: mat("a", n, d, rng),
            b: mat("b", n, d, rng),
            scale: scale_in(rng),
        };
        gradcheck(&mut m, |m, tape| {
            let (a, b, s) = (tape.param(&m.a), tape.param(&m.b), m.scale.var(tape));
            info_nce_symmetric(tape, a, b, s)
        })
    })
}

pub fn simcse_sup() -> CaseResult {
    run_case("simcse_supervised", |rng, _| {
        let (n, d) = (2 + rng.below(5), 2 + rng.below(6));
        let symmetric = rng.bernoulli(0.5);
        let mut m = Pair {
            a: mat("a", n, d, rng),
            b: mat("b", n, d, rng),
            scale: scale_in(rng),
        };
        gradcheck(&mut m, |m, tape| {
            let (a, b, s) = (tape.param(&m.a), tape.param(&m.b), m.scale.var(tape));
            simcse_supervised(tape, a, b, s, symmetric)
        })
    })
}

pub fn simcse_unsup() -> CaseResult {
    run_case("simcse_unsupervised", |rng, seed| {
        let cfg = tiny_text(rng);
        let batch = random_batch(&cfg, 2 + rng.below(3), rng);
        let mut enc = encoder(cfg, rng);
        let head = if rng.bernoulli(0.5) {
            enc.set_trainable(false);
            Some(Adaptor::new(
                "head",
                AdaptorConfig {
                    depth: 1,
                    expansion: 2,
                    ..Default::default()
                },
                8,
                6,
                rng,
            )?)
        } else {
            None
        };
        let symmetric = rng.bernoulli(0.5);
        let mut m = Unsup {
            enc,
            head,
            scale: scale_in(rng),
        };
        gradcheck(&mut m, |m, tape| {
            // the same stream on every evaluation gives the same dropout masks
            let mut drop = Rng::new(seed ^ 0xd0);
            let s = m.scale.var(tape);
            Ok(simcse_unsupervised(
                tape,
                &m.enc,
                m.head.as_ref(),
                &batch,
                &mut drop,
                s,
                symmetric,
            )?
            .loss)
        })
    })
}

pub fn mntp() -> CaseResult {
    run_case("mntp", |rng, seed| {
        let cfg = tiny_text(rng);
        let batch = random_batch(&cfg, 2 + rng.below(3), rng);
        let mut positions = mntp_select(&batch, 0.4, rng)?;
        if positions.is_empty() {
            positions.push((0, 1));
        }
        let with_dropout = rng.bernoulli(0.5);
        let mut m = Enc {
            enc: encoder(cfg, rng),
        };
        gradcheck(&mut m, |m, tape| {
            let mut r = Rng::new(seed ^ 0xd1);
            let mut d = if with_dropout {
                Dropout::Sample {
                    rate: 0.1,
                    rng: &mut r,
                }
            } else {
                Dropout::Off
            };
            Ok(mntp_loss_masked(tape, &m.enc, &batch, &positions, &mut d)?.loss)
        })
    })
}

fn stage2_case(name: &'static str, method: Stage2Method) -> CaseResult {
    run_case(name, move |rng, _| {
        let (n, d) = (2 + rng.below(4), 2 + rng.below(4));
        let weights = if rng.bernoulli(0.5) {
            Stage2Weights::default()
        } else {
            Stage2Weights {
                llm_vision: rng.uniform_in(0.2, 2.0),
                clip_text_vision: rng.uniform_in(0.2, 2.0),
                extra: rng.uniform_in(0.2, 2.0),
            }
        };
        let mut concat = Linear::new("concat", 2 * d, 2 * d, 0.5, true, rng);
        jitter(concat.b.as_mut().expect("bias"), 0.3, rng);
        let mut m = Stage2 {
            llm: mat("llm", n, d, rng),
            clip: mat("clip", n, d, rng),
            vision: mat("vision", n, d, rng),
            wide: mat("wide", n, 2 * d, rng),
            concat,
            scale: scale_in(rng),
        };
        gradcheck(&mut m, |m, tape| {
            let emb = Stage2Embeddings {
                llm: tape.param(&m.llm),
                clip_text: Some(tape.param(&m.clip)),
                vision: tape.param(&m.vision),
                vision_wide: Some(tape.param(&m.wide)),
            };
            let s = m.scale.var(tape);
            stage2_loss(tape, method, emb, Some(&m.concat), weights, s)
        })
    })
}

pub fn stage2_a() -> CaseResult {
    stage2_case("stage2_a", Stage2Method::A)
}
pub fn stage2_b() -> CaseResult {
    stage2_case("stage2_b", Stage2Method::B)
}
pub fn stage2_c() -> CaseResult {
    stage2_case("stage2_c", Stage2Method::C)
}
pub fn stage2_d() -> CaseResult {
    stage2_case("stage2_d", Stage2Method::D)
}

pub fn linear() -> CaseResult {
    run_case("linear", |rng, seed| {
        let (n, i, o) = (1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(5));
        let mut lin = Linear::new("lin", i, o, 1.0, rng.bernoulli(0.5), rng);
        if let Some(b) = lin.b.as_mut() {
            jitter(b, 1.0, rng);
        }
        let mut m = LinearCase {
            lin,
            x: mat("x", n, i, rng),
        };
        gradcheck(&mut m, |m, tape| {
            let x = tape.param(&m.x);
            let y = m.lin.forward(tape, x)?;
            project(tape, y, seed)
        })
    })
}

pub fn layer_norm() -> CaseResult {
    run_case("layer_norm", |rng, seed| {
        let (n, d) = (1 + rng.below(4), 2 + rng.below(6));
        let mut ln = LayerNorm::new("ln", d);
        jitter(&mut ln.gain, 0.5, rng);
        jitter(&mut ln.bias, 0.5, rng);
        let mut m = LnCase {
            ln,
            x: mat("x", n, d, rng),
        };
        gradcheck(&mut m, |m, tape| {
            let x = tape.param(&m.x);
            let y = m.ln.forward(tape, x)?;
            project(tape, y, seed)
        })
    })
}

fn attention_case(name: &'static str, causal: bool) -> CaseResult {
    run_case(name, move |rng, seed| {
        let heads = 1 + rng.below(2);
        let d = heads * (1 + rng.below(3));
        let total = 1 + rng.below(8);
        let segs = random_segments(total, rng);
        let mut m = Qkv {
            q: mat("q", total, d, rng),
            k: mat("k", total, d, rng),
            v: mat("v", total, d, rng),
        };
        gradcheck(&mut m, |m, tape| {
            let (q, k, v) = (tape.param(&m.q), tape.param(&m.k), tape.param(&m.v));
            let y = tape.attention(q, k, v, &segs, heads, causal)?;
            project(tape, y, seed)
        })
    })
}

pub fn attention_causal() -> CaseResult {
    attention_case("attention_causal", true)
}
pub fn attention_bidirectional() -> CaseResult {
    attention_case("attention_bidirectional", false)
}

/// The remaining tape primitives chained into one graph.
pub fn tape_ops() -> CaseResult {
    run_case("tape_ops", |rng, seed| {
        let (n, d) = (2 + rng.below(4), 2 + rng.below(4));
        let labels: Vec<usize> = (0..n).map(|_| rng.below(2 * d)).collect();
        let idx: Vec<usize> = (0..n + 1).map(|_| rng.below(n)).collect();
        let segs = random_segments(n + 1, rng);
        let mut m = OpsCase {
            x: mat("x", n, d, rng),
            y: mat("y", n, d, rng),
        };
        gradcheck(&mut m, |m, tape| {
            let (x, y) = (tape.param(&m.x), tape.param(&m.y));
            let g = tape.gelu(x);
            let e = tape.scale(y, 0.3);
            let e = tape.exp(e);
            let e = tape.clamp_max(e, 1e6);
            let p = tape.mul(g, e)?;
            let c = tape.concat_cols(p, y)?;
            let ce = tape.cross_entropy(c, &labels)?;
            let s = tape.softmax_rows(c)?;
            let nrm = tape.normalize_rows(c)?;
            let t = tape.transpose(nrm)?;
            let mm = tape.matmul(s, t)?;
            let gram = tape.matmul_t(g, true, e, false)?;
            let gram = project(tape, gram, seed + 7)?;
            let gth = tape.gather_rows(mm, &idx)?;
            let sm = tape.segment_mean(gth, &segs)?;
            let mean = tape.mean(sm);
            let r = project(tape, sm, seed)?;
            let k = tape.mul_scalar(r, mean)?;
            let k = tape.add(k, gram)?;
            tape.add(k, ce)
        })
    })
}

pub fn text_encoder() -> CaseResult {
    run_case("text_encoder", |rng, seed| {
        let cfg = tiny_text(rng);
        let batch = random_batch(&cfg, 1 + rng.below(3), rng);
        let with_dropout = rng.bernoulli(0.5);
        let mut m = Enc {
            enc: encoder(cfg, rng),
        };
        gradcheck(&mut m, |m, tape| {
            let mut r = Rng::new(seed ^ 0xd2);
            let mut d = if with_dropout {
                Dropout::Sample {
                    rate: 0.1,
                    rng: &mut r,
                }
            } else {
                Dropout::Off
            };
            let out = m.enc.forward(tape, &batch, &mut d)?;
            let a = project(tape, out.sentence, seed)?;
            let b = project(tape, out.hidden, seed + 1)?;
            tape.add(a, b)
        })
    })
}

pub fn text_encoder_lora() -> CaseResult {
    run_case("text_encoder_lora", |rng, seed| {
        let cfg = tiny_text(rng);
        let batch = random_batch(&cfg, 1 + rng.below(3), rng);
        let mut enc = encoder(cfg, rng);
        let targets = if rng.bernoulli(0.5) {
            LoraConfig::default().targets
        } else {
            vec![LoraTarget::Value, LoraTarget::FfnUp, LoraTarget::FfnDown]
        };
        enc.attach_lora(
            LoraConfig {
                rank: 1 + rng.below(3),
                alpha: 2.0,
                targets,
            },
            rng,
        )?;
        // B starts at zero, which would leave A with no gradient to check
        for p in enc.lora_params_mut() {
            jitter(p, 0.5, rng);
        }
        let mut m = Enc { enc };
        gradcheck(&mut m, |m, tape| {
            let out = m.enc.forward(tape, &batch, &mut Dropout::Off)?;
            project(tape, out.sentence, seed)
        })
    })
}

pub fn adaptor_linear() -> CaseResult {
    run_case("adaptor_linear", |rng, seed| {
        let d = 2 + rng.below(4);
        let cfg = AdaptorConfig {
            kind: AdaptorKind::Linear,
            depth: rng.below(3),
            expansion: 1 + rng.below(2),
            n_latents: 1,
        };
        let mut adaptor = Adaptor::new("ad", cfg, d, 1 + rng.below(4), rng)?;
        for p in adaptor.params_mut() {
            jitter(p, 0.3, rng);
        }
        let mut m = PooledAdaptor {
            adaptor,
            x: mat("x", 1 + rng.below(4), d, rng),
        };
        gradcheck(&mut m, |m, tape| {
            let x = tape.param(&m.x);
            let y = m.adaptor.forward_pooled(tape, x)?;
            project(tape, y, seed)
        })
    })
}

pub fn adaptor_transformer() -> CaseResult {
    run_case("adaptor_transformer", |rng, seed| {
        let cfg = tiny_text(rng);
        let batch = random_batch(&cfg, 1 + rng.below(3), rng);
        let mut enc = encoder(cfg, rng);
        enc.set_trainable(false);
        let acfg = AdaptorConfig {
            kind: AdaptorKind::Transformer,
            depth: 1 + rng.below(2),
            expansion: 2,
            n_latents: 1 + rng.below(4),
        };
        let mut adaptor = Adaptor::new("ad", acfg, 8, 5, rng)?;
        for p in adaptor.params_mut() {
            jitter(p, 0.3, rng);
        }
        let mut m = AdaptorCase { enc, adaptor };
        gradcheck(&mut m, |m, tape| {
            let out = m.enc.forward(tape, &batch, &mut Dropout::Off)?;
            let y = m.adaptor.forward(tape, &out)?;
            project(tape, y, seed)
        })
    })
}

pub fn vision_encoder() -> CaseResult {
    run_case("vision_encoder", |rng, seed| {
        let cfg = VisionEncoderConfig {
            input_dim: 1 + rng.below(5),
            hidden_dim: 2 + rng.below(5),
            n_blocks: rng.below(3),
            output_dim: 1 + rng.below(4),
        };
        let mut vision = VisionEncoder::new("vis", cfg.clone(), rng)?;
        for p in vision.params_mut() {
            jitter(p, 0.3, rng);
        }
        let mut m = VisionCase {
            vision,
            x: mat("x", 1 + rng.below(4), cfg.input_dim, rng),
        };
        gradcheck(&mut m, |m, tape| {
            let x = tape.param(&m.x);
            let y = m.vision.forward(tape, x)?;
            project(tape, y, seed)
        })
    })
}

pub fn all_cases() -> Vec<fn() -> CaseResult> {
    vec![
        info_nce,
        simcse_sup,
        simcse_unsup,
        mntp,
        stage2_a,
        stage2_b,
        stage2_c,
        stage2_d,
        linear,
        layer_norm,
        attention_causal,
        attention_bidirectional,
        tape_ops,
        text_encoder,
        text_encoder_lora,
        adaptor_linear,
        adaptor_transformer,
        vision_encoder,
    ]
}

pub fn run_all() -> Vec<CaseResult> {
    all_cases().into_iter().map(|f| f()).collect()
}
