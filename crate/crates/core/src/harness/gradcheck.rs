//! Finite-difference checks of every model block and of the whole model on
//! a tiny configuration, always in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aligner::{Aligner, Decoder};
use crate::config::{Mode, ModelConfig};
use crate::data::{bce_loss, generate_scene, image_tensor, GrammarConfig};
use crate::encoders::{tokenize, ImageEncoder, TextEncoder, Vocabulary};
use crate::error::Result;
use crate::fusion::FusionNeck;
use crate::model::Eavl;
use crate::nn::{Attention, Builder, LayerNorm, Linear};
use crate::query::QueryGenerator;
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, ParamStore, Tape, Tensor, Var};

/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub report: GradCheckReport,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < TOLERANCE
    }
}

pub fn default_options() -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-4,
        max_entries_per_param: Some(16),
        seed: 7,
        five_point: true,
        floor: 1e-6,
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// All parts flattened into one `1×Σn` row.
fn flat<'t>(parts: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
    let tape = parts[0].tape();
    let rows = parts
        .iter()
        .map(|p| p.reshape(&[1, p.value().numel()]))
        .collect::<crate::tensor::Result<Vec<_>>>()?;
    Ok(tape.concat(&rows, 1)?)
}

fn check<M>(
    name: &str,
    opts: &GradCheckOptions,
    seed: u64,
    build: impl FnOnce(&mut Builder<'_, f64>) -> crate::tensor::Result<M>,
    f: impl for<'t> Fn(&M, &'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>,
) -> Result<BlockReport> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let module = build(&mut Builder::new(&mut store, &mut rng))?;
    let report = grad_check(|tape, ps| f(&module, tape, ps).map_err(into_tensor_err), &store, opts)
        .map_err(crate::Error::from)?;
    Ok(BlockReport {
        name: name.to_string(),
        report,
    })
}

fn into_tensor_err(e: crate::Error) -> crate::tensor::TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => crate::tensor::TensorError::Config(other.to_string()),
    }
}

/// The tiny configuration used for end-to-end checks: `C = 8`, `N_q = 2`,
/// 16×16 images.
pub fn tiny_config() -> ModelConfig {
    ModelConfig::tiny()
}

/// Checks each block with random inputs, then the whole tiny model in
/// every mode through the training loss.
pub fn gradcheck_suite(opts: &GradCheckOptions) -> Result<Vec<BlockReport>> {
    let cfg = tiny_config();
    let c = cfg.width;
    let (h2, w2) = cfg.pyramid()[0];
    let (h3, w3) = cfg.pyramid()[1];
    let (h4, w4) = cfg.pyramid()[2];
    let nq = cfg.num_queries;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let vocab = Vocabulary::synthetic();
    let tokens = tokenize("red circle left of blue square", &vocab, cfg.max_len)?;
    let mut out = Vec::new();

    let x = random(&mut rng, &[5, 6]);
    out.push(check(
        "linear",
        opts,
        1,
        |b| Linear::new(b, "lin", 6, 4, true, false),
        |m, t, ps| Ok(m.forward(ps, t.constant(x.clone()))?),
    )?);

    let x = random(&mut rng, &[4, c]);
    out.push(check(
        "layer_norm",
        opts,
        2,
        |b| LayerNorm::new(b, "ln", c),
        |m, t, ps| Ok(m.forward(ps, t.constant(x.clone()))?),
    )?);

    let (q, kv) = (random(&mut rng, &[3, c]), random(&mut rng, &[5, c]));
    out.push(check(
        "attention",
        opts,
        3,
        |b| Attention::new(b, "attn", c, cfg.heads),
        |m, t, ps| {
            let mask = [true, true, false, true, false];
            Ok(m.forward(ps, t.constant(q.clone()), t.constant(kv.clone()), Some(&mask))?)
        },
    )?);

    out.push(check(
        "text_encoder",
        opts,
        4,
        |b| TextEncoder::new(b, &cfg, vocab.len()),
        |m, t, ps| {
            let f = m.encode(ps, t, &tokens)?;
            flat(&[f.tokens, f.global])
        },
    )?);

    let image = random(&mut rng, &[cfg.image_height, cfg.image_width, 3]).map(|v| 0.5 + 0.5 * v);
    out.push(check(
        "image_encoder",
        opts,
        5,
        |b| ImageEncoder::new(b, &cfg),
        |m, t, ps| {
            let f = m.encode(ps, t.constant(image.clone()))?;
            flat(&[f.v2, f.v3, f.v4, f.global])
        },
    )?);

    let v2 = random(&mut rng, &[h2, w2, c]);
    let v3 = random(&mut rng, &[h3, w3, c]);
    let v4 = random(&mut rng, &[h4, w4, c]);
    let tg = random(&mut rng, &[1, cfg.text_global_width]);
    out.push(check(
        "fusion_neck",
        opts,
        6,
        |b| FusionNeck::new(b, &cfg),
        |m, t, ps| {
            let [a, b, d, g] = [&v2, &v3, &v4, &tg].map(|x| t.constant(x.clone()));
            Ok(m.forward(ps, a, b, d, g)?.fvt)
        },
    )?);

    let ft = random(&mut rng, &[cfg.max_len, c]);
    let vg = random(&mut rng, &[1, c]);
    let mask = tokens.key_mask();
    out.push(check(
        "query_generator",
        opts,
        7,
        |b| QueryGenerator::new(b, &cfg),
        |m, t, ps| {
            let [a, b, d, g, txt] = [&v2, &v3, &v4, &vg, &ft].map(|x| t.constant(x.clone()));
            let qs = m.forward(ps, a, b, d, Some(g), txt, &mask)?;
            flat(&[qs.queries, qs.attention])
        },
    )?);

    let vt = random(&mut rng, &[h3 * w3, c]);
    let fq = random(&mut rng, &[nq, c]);
    out.push(check(
        "decoder",
        opts,
        8,
        |b| Decoder::new(b, &cfg),
        |m, t, ps| Ok(m.decode(ps, t.constant(vt.clone()), t.constant(fq.clone()))?.features),
    )?);

    let fs = random(&mut rng, &[h3, w3, c]);
    for mode in Mode::ALL {
        if mode == Mode::NoFvg {
            continue;
        }
        out.push(check(
            &format!("aligner[{mode}]"),
            opts,
            9,
            |b| Aligner::new(b, &cfg, mode),
            |m, t, ps| {
                let o = m.forward(ps, t.constant(fs.clone()), t.constant(fq.clone()))?;
                flat(&[o.y, o.masks])
            },
        )?);
    }

    let sample = generate_scene(11, &GrammarConfig::for_image(cfg.image_height, cfg.image_width))?;
    let img = image_tensor::<f64>(&sample.image);
    for mode in Mode::ALL {
        let mut store = ParamStore::new();
        let model = Eavl::new(cfg.clone(), mode, &mut store, 0)?;
        let toks = model.tokenize(&sample.expression)?;
        let report = grad_check(
            |t, ps| {
                let o = model.forward(ps, t, t.constant(img.clone()), &toks).map_err(into_tensor_err)?;
                bce_loss(o.y, &sample.mask).map_err(into_tensor_err)
            },
            &store,
            opts,
        )?;
        out.push(BlockReport {
            name: format!("end_to_end[{mode}]"),
            report,
        });
    }
    Ok(out)
}
