//! Finite-difference checks of every trainable block. Parameters are
//! re-drawn at random first so zero-initialised heads do not hide paths.
//! Each group returns the number of entries checked, or a description of
//! the first failure.

use hazeloop_core::downstream::{feedback_channels, TaskAdapter, TaskFeedback, TaskKind, TaskTarget, ToyAdapter};
use hazeloop_core::gradcheck::{check_input, check_params, probe_loss, probe_weights, CheckReport};
use hazeloop_core::graph::{Graph, Var};
use hazeloop_core::idn::{Idn, IdnConfig, Site};
use hazeloop_core::igm::Igm;
use hazeloop_core::layers::{ChannelGate, Conv2d, LayerNorm, Linear, Mlp, PixelMlp, SelfAttention, TransformerBlock};
use hazeloop_core::losses::{contrastive_ratio_var, l1_var, mcr_var, reconstruction_var, PerceptualExtractor};
use hazeloop_core::param::{Init, ParamStore};
use hazeloop_core::pipeline::synth_dataset;
use hazeloop_core::haze::HazeRanges;
use hazeloop_core::rng::SeedTree;
use hazeloop_core::tensor::Tensor;
use hazeloop_core::tfga::Tfga;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;
const PER_TENSOR: usize = 4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randomize(store: &mut ParamStore, r: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = r.gen_range(-scale..scale));
    }
}

fn image(shape: &[usize], r: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

pub type Outcome = Result<usize, String>;

fn verdict(name: &str, rep: &CheckReport) -> Outcome {
    if rep.passes(TOL) {
        Ok(rep.checked)
    } else {
        Err(format!("{name}: max rel err {:.3e} at {:?} over {} entries", rep.max_rel_err, rep.worst, rep.checked))
    }
}

/// Checks parameters and the input of `f`, probed by a fixed random weighting.
fn check_block(name: &str, store: &ParamStore, input: &Tensor, f: impl Fn(&mut Graph, &ParamStore, Var) -> Var, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let out_shape = {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = f(&mut g, store, x);
        g.shape(y).to_vec()
    };
    let probe = probe_weights(&out_shape, &mut r);
    let p = check_params(
        store,
        |g, ps| {
            let x = g.constant(input.clone());
            let y = f(g, ps, x);
            probe_loss(g, y, &probe)
        },
        None,
        PER_TENSOR,
        &mut r,
    );
    let n = verdict(&format!("{name} params"), &p)?;
    let i = check_input(
        input,
        |g, x| {
            let y = f(g, store, x);
            probe_loss(g, y, &probe)
        },
        24,
        &mut r,
    );
    Ok(n + verdict(&format!("{name} input"), &i)?)
}

fn built<T>(seed: u64, scale: f64, make: impl FnOnce(&mut Init) -> T) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let block = {
        let mut init = Init::new(&mut store, &mut r, "b");
        make(&mut init)
    };
    randomize(&mut store, &mut r, scale);
    (store, block)
}

pub fn layer_blocks() -> Outcome {
    let mut n = 0;
    let mut r = rng(1);
    let x = image(&[4, 6, 6], &mut r, -1.0, 1.0);
    let (s, conv) = built(2, 0.5, |i| Conv2d::new(i, "c", 4, 3, 3, 1));
    n += check_block("conv3x3", &s, &x, |g, ps, x| conv.forward(g, ps, x), 3)?;
    let (s, conv) = built(4, 0.5, |i| Conv2d::new(i, "c", 4, 5, 3, 2));
    n += check_block("conv stride 2", &s, &x, |g, ps, x| conv.forward(g, ps, x), 5)?;
    let (s, conv) = built(6, 0.5, |i| Conv2d::no_bias(i, "c", 4, 2, 1, 1));
    n += check_block("conv1x1", &s, &x, |g, ps, x| conv.forward(g, ps, x), 7)?;
    let (s, gate) = built(8, 0.5, |i| ChannelGate::new(i, "g", 4, 2));
    n += check_block("channel gate", &s, &x, |g, ps, x| gate.gate(g, ps, x), 9)?;
    let (s, m) = built(10, 0.5, |i| PixelMlp::new(i, "m", 4, 6, 3));
    n += check_block("pixel mlp", &s, &x, |g, ps, x| m.forward(g, ps, x), 11)?;

    let tokens = image(&[5, 4], &mut r, -1.0, 1.0);
    let (s, lin) = built(12, 0.5, |i| Linear::new(i, "l", 4, 3));
    n += check_block("linear", &s, &tokens, |g, ps, x| lin.forward(g, ps, x), 13)?;
    let (s, ln) = built(14, 0.5, |i| LayerNorm::new(i, "n", 4));
    n += check_block("layer norm", &s, &tokens, |g, ps, x| ln.forward(g, ps, x), 15)?;
    let (s, m) = built(16, 0.5, |i| Mlp::new(i, "m", 4, 8, 4));
    n += check_block("mlp", &s, &tokens, |g, ps, x| m.forward(g, ps, x), 17)?;
    let (s, a) = built(18, 0.5, |i| SelfAttention::new(i, "a", 4, 2));
    n += check_block("self attention", &s, &tokens, |g, ps, x| a.forward(g, ps, x), 19)?;

    let fmap = image(&[4, 4, 4], &mut r, -1.0, 1.0);
    let (s, t) = built(20, 0.4, |i| TransformerBlock::new(i, "t", 4, 2, 2));
    n += check_block("transformer block", &s, &fmap, |g, ps, x| t.forward(g, ps, x), 21)?;
    Ok(n)
}

fn small_idn(seed: u64) -> (ParamStore, Idn) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let cfg = IdnConfig {
        channels: [4, 8, 8],
        ..IdnConfig::default()
    };
    let idn = Idn::new(&mut store, &mut r, cfg);
    randomize(&mut store, &mut r, 0.15);
    (store, idn)
}

pub fn idn_stages() -> Outcome {
    let mut n = 0;
    let (s, idn) = small_idn(30);
    let mut r = rng(31);
    let x = image(&[3, 8, 8], &mut r, 0.3, 0.7);
    n += check_block("idn encoder", &s, &x, |g, ps, x| idn.encode(g, ps, x).deepest(), 32)?;
    n += check_block(
        "idn full (raw)",
        &s,
        &x,
        |g, ps, x| {
            let f = idn.encode(g, ps, x);
            idn.decode_raw(g, ps, &f, None)
        },
        33,
    )?;
    n += check_block("idn full", &s, &x, |g, ps, x| idn.forward_graph(g, ps, x, None), 34)?;
    let a = image(&[8, 2, 2], &mut r, -1.0, 1.0);
    let b = image(&[8, 2, 2], &mut r, -1.0, 1.0);
    n += check_block(
        "ffm",
        &s,
        &a,
        |g, ps, x| {
            let d = g.constant(b.clone());
            idn.ffm_deep.fuse(g, ps, x, d, None)
        },
        35,
    )?;
    Ok(n)
}

fn tfga_fixture(seed: u64) -> (ParamStore, Tfga) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let fb: Vec<_> = TaskKind::ALL.iter().map(|&k| (k, feedback_channels(k))).collect();
    let t = Tfga::new(&mut store, &mut r, 8, &fb);
    randomize(&mut store, &mut r, 0.3);
    (store, t)
}

fn feedback(kind: TaskKind, r: &mut ChaCha8Rng) -> TaskFeedback {
    match kind {
        TaskKind::Seg => TaskFeedback::SegLogits(image(&[2, 8, 8], r, -2.0, 2.0)),
        TaskKind::Depth => TaskFeedback::Depth(image(&[1, 8, 8], r, 0.5, 5.0)),
        TaskKind::Det => TaskFeedback::DetFeatures(image(&[16, 4, 4], r, -1.0, 1.0)),
    }
}

pub fn tfga_sub_blocks() -> Outcome {
    let mut n = 0;
    let (s, t) = tfga_fixture(40);
    let mut r = rng(41);
    let img = image(&[3, 8, 8], &mut r, 0.0, 1.0);
    n += check_block("tfga image adapter", &s, &img, |g, ps, x| t.adapt_image(g, ps, x).unwrap(), 42)?;
    let f_down = image(&[8, 2, 2], &mut r, -1.0, 1.0);
    let f_id = image(&[8, 2, 2], &mut r, -1.0, 1.0);
    n += check_block(
        "tfga cross attention",
        &s,
        &f_id,
        |g, ps, x| {
            let d = g.constant(f_down.clone());
            let c = t.cross_attention(g, ps, x, d).unwrap();
            g.concat(&[c.fused, c.id_to_c, c.c_to_id, c.down_id_to_c, c.down_c_to_id])
        },
        43,
    )?;
    n += check_block(
        "tfga distill + weights",
        &s,
        &f_id,
        |g, ps, x| {
            let d = g.constant(f_down.clone());
            let c = t.cross_attention(g, ps, x, d).unwrap();
            let f_idd = t.distill(g, ps, &c);
            let q = t.weight_generation(g, ps, f_idd);
            g.concat(&[f_idd, q.q_id, q.q_down])
        },
        44,
    )?;
    n += check_block(
        "tfga fuse",
        &s,
        &f_id,
        |g, ps, x| {
            let d = g.constant(f_down.clone());
            t.fuse(g, ps, x, d).unwrap().0
        },
        45,
    )?;
    let deep = image(&[8, 2, 2], &mut r, -1.0, 1.0);
    for (i, kind) in TaskKind::ALL.into_iter().enumerate() {
        let fb = feedback(kind, &mut r);
        n += check_block(
            &format!("tfga run ({})", kind.name()),
            &s,
            &img,
            |g, ps, x| {
                let dp = g.constant(deep.clone());
                t.run(g, ps, x, &fb, dp).unwrap().injection
            },
            46 + i as u64,
        )?;
    }
    Ok(n)
}

pub fn igm_sub_blocks() -> Outcome {
    let mut n = 0;
    let mut store = ParamStore::new();
    let mut r = rng(50);
    let igm = Igm::new(&mut store, &mut r, 6, 8, 4);
    randomize(&mut store, &mut r, 0.3);
    let text = image(&[6], &mut r, -1.0, 1.0);
    for (site, c, seed) in [(Site::EncoderExit, 8, 51), (Site::DecoderFirst, 4, 52)] {
        let sb = igm.site(site);
        let f = image(&[c, 2, 2], &mut r, -1.0, 1.0);
        n += check_block("igm text adapter", &store, &text, |g, ps, x| sb.adapt_text(g, ps, x), seed)?;
        n += check_block("igm refine", &store, &f, |g, ps, x| sb.refine_image(g, ps, x), seed + 10)?;
        n += check_block(
            "igm weights",
            &store,
            &text,
            |g, ps, x| {
                let fm = g.constant(f.clone());
                let t = sb.adapt_text(g, ps, x);
                let su = sb.refine_image(g, ps, fm);
                sb.weights(g, ps, t, su)
            },
            seed + 20,
        )?;
        n += check_block(
            "igm modulate",
            &store,
            &f,
            |g, ps, x| {
                let t = g.constant(text.clone());
                sb.modulate(g, ps, x, t).unwrap()
            },
            seed + 30,
        )?;
    }
    Ok(n)
}

pub fn losses() -> Outcome {
    let mut n = 0;
    let mut r = rng(60);
    let ex = PerceptualExtractor::toy(&mut r);
    let clear = image(&[3, 8, 8], &mut r, 0.0, 1.0);
    let hazy = image(&[3, 8, 8], &mut r, 0.3, 1.0);
    let pred = image(&[3, 8, 8], &mut r, 0.0, 1.0);
    let rep = check_input(&pred, |g, p| {
        let c = g.constant(clear.clone());
        l1_var(g, p, c)
    }, 48, &mut r);
    n += verdict("l1", &rep)?;
    let rep = check_input(&pred, |g, p| {
        let c = g.constant(clear.clone());
        let h = g.constant(hazy.clone());
        contrastive_ratio_var(g, &ex, c, p, h)
    }, 48, &mut r);
    n += verdict("contrastive ratio", &rep)?;
    let rep = check_input(&pred, |g, p| {
        let c = g.constant(clear.clone());
        let h = g.constant(hazy.clone());
        reconstruction_var(g, &ex, 0.1, c, p, h).0
    }, 48, &mut r);
    n += verdict("reconstruction", &rep)?;
    for lw in [0.1, 0.4, 0.6] {
        let rep = check_input(&Tensor::scalar(lw), |g, l| mcr_var(g, l, 0.4, 0.8, 0.1, 0.3), 1, &mut r);
        n += verdict(&format!("mcr at {lw}"), &rep)?;
    }
    Ok(n)
}

pub fn toy_task_heads() -> Outcome {
    let mut n = 0;
    let data = synth_dataset(1, 8, &HazeRanges::default(), &SeedTree::new(70), "g").unwrap();
    let s = &data.samples[0];
    for kind in TaskKind::ALL {
        let mut r = rng(71 + kind as u64);
        let mut adapter = ToyAdapter::new(kind, &mut r);
        randomize(&mut adapter.store, &mut r, 0.3);
        let target: TaskTarget = s.target(kind);
        let rep = check_params(
            &adapter.store,
            |g, ps| {
                let mut a = adapter.clone();
                a.store = ps.clone();
                let x = g.constant(s.clear.clone());
                let out = a.forward(g, x).output;
                a.loss_var(g, out, &target).unwrap()
            },
            None,
            PER_TENSOR,
            &mut r,
        );
        n += verdict(&format!("{} head params", kind.name()), &rep)?;
        let rep = check_input(
            &s.clear,
            |g, x| {
                let out = adapter.forward(g, x).output;
                adapter.loss_var(g, out, &target).unwrap()
            },
            24,
            &mut r,
        );
        n += verdict(&format!("{} head input", kind.name()), &rep)?;
    }
    Ok(n)
}

/// Every group, in a fixed order.
#[allow(dead_code)]
pub fn all() -> [(&'static str, fn() -> Outcome); 6] {
    [
        ("layers", layer_blocks),
        ("idn", idn_stages),
        ("tfga", tfga_sub_blocks),
        ("igm", igm_sub_blocks),
        ("losses", losses),
        ("task heads", toy_task_heads),
    ]
}
