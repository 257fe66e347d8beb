//! Finite-difference oracle shared by the kernel tests and the acceptance run.
//!
//! Each check draws a random cotangent `u`, treats `<u, f(inputs)>` as a
//! scalar loss, and compares every analytic VJP output with central
//! differences of that loss.

#![allow(dead_code)]

use revffn::block::{block_fwd, block_vjp_from_input, branch_attn, branch_attn_vjp, branch_mlp, branch_mlp_vjp, BlockDims, BlockParams, CouplingVariant, StreamPair};
use revffn::gradcheck::{fd_gradient, relative_error, FD_STEP};
use revffn::kernels::{
    cross_attention_fwd, cross_attention_vjp, linear_fwd, linear_vjp, mlp_fwd, mlp_vjp, rmsnorm_fwd, rmsnorm_vjp,
    silu_fwd, silu_vjp, AttentionParams, GradTape, LinearParams, MlpParams, NormParams,
};
use revffn::moe::{moe_fwd, moe_vjp, ExpertBank, RouterParams};
use revffn::{Precision, Result, Rng, Tensor};

const D: Precision = Precision::Double;

/// Relative error of one gradient tensor.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub rel: f64,
}

type Forward<'a> = Box<dyn Fn(&[Tensor]) -> Result<Tensor> + 'a>;
type Backward<'a> = Box<dyn Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>> + 'a>;

/// Compare `grad(ts, u)[i]` with central differences of `<u, f(ts)>` in `ts[i]`.
pub fn check(prefix: &str, labels: &[&str], ts: Vec<Tensor>, f: Forward<'_>, grad: Backward<'_>, rng: &mut Rng) -> Result<Vec<Check>> {
    assert_eq!(labels.len(), ts.len());
    let out = f(&ts)?;
    let u = Tensor::randn(out.shape(), 1.0, D, rng)?;
    let analytic = grad(&ts, &u)?;
    let mut checks = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        let numeric = fd_gradient(&ts[i], FD_STEP, |t| {
            let mut v = ts.clone();
            v[i] = t.clone();
            f(&v)?.dot(&u)
        })?;
        checks.push(Check {
            name: format!("{prefix}.{label}"),
            rel: relative_error(&analytic[i], &numeric)?,
        });
    }
    Ok(checks)
}

fn lin(w: &Tensor) -> LinearParams {
    LinearParams {
        weight: w.clone(),
        bias: None,
    }
}

fn rmsnorm_case(rng: &mut Rng) -> Result<Vec<Check>> {
    let x = Tensor::randn(&[3, 4], 1.0, D, rng)?;
    let g = Tensor::uniform(&[4], 0.5, 1.5, D, rng)?;
    let p = |ts: &[Tensor]| NormParams {
        gain: ts[1].clone(),
        eps: 1e-6,
    };
    check(
        "rmsnorm",
        &["x", "gain"],
        vec![x, g],
        Box::new(move |ts| rmsnorm_fwd(&ts[0], &p(ts), None)),
        Box::new(move |ts, u| {
            let mut tape = GradTape::new();
            rmsnorm_fwd(&ts[0], &p(ts), Some(&mut tape))?;
            let (dx, gp) = rmsnorm_vjp(&p(ts), &mut tape, u)?;
            Ok(vec![dx, gp.gain])
        }),
        rng,
    )
}

fn linear_case(rng: &mut Rng) -> Result<Vec<Check>> {
    let x = Tensor::randn(&[2, 3, 5], 1.0, D, rng)?;
    let w = Tensor::randn(&[4, 5], 0.5, D, rng)?;
    let b = Tensor::randn(&[4], 0.5, D, rng)?;
    let p = |ts: &[Tensor]| lin(&ts[1]).with_bias(ts[2].clone());
    check(
        "linear",
        &["x", "weight", "bias"],
        vec![x, w, b],
        Box::new(move |ts| linear_fwd(&ts[0], &p(ts)?, None)),
        Box::new(move |ts, u| {
            let p = p(ts)?;
            let mut tape = GradTape::new();
            linear_fwd(&ts[0], &p, Some(&mut tape))?;
            let (dx, g) = linear_vjp(&p, &mut tape, u)?;
            Ok(vec![dx, g.weight, g.bias.expect("bias grad")])
        }),
        rng,
    )
}

fn silu_case(rng: &mut Rng) -> Result<Vec<Check>> {
    let x = Tensor::randn(&[4, 6], 2.0, D, rng)?;
    check(
        "silu",
        &["x"],
        vec![x],
        Box::new(|ts| silu_fwd(&ts[0], None)),
        Box::new(|ts, u| {
            let mut tape = GradTape::new();
            silu_fwd(&ts[0], Some(&mut tape))?;
            Ok(vec![silu_vjp(&mut tape, u)?])
        }),
        rng,
    )
}

fn mlp_case(rng: &mut Rng) -> Result<Vec<Check>> {
    let base = MlpParams::randn(6, 8, D, rng)?;
    let x = Tensor::randn(&[3, 6], 1.0, D, rng)?;
    let p = |ts: &[Tensor]| MlpParams {
        fc1: lin(&ts[1]),
        fc2: lin(&ts[2]),
    };
    check(
        "mlp",
        &["x", "fc1", "fc2"],
        vec![x, base.fc1.weight, base.fc2.weight],
        Box::new(move |ts| mlp_fwd(&ts[0], &p(ts), None)),
        Box::new(move |ts, u| {
            let mut tape = GradTape::new();
            mlp_fwd(&ts[0], &p(ts), Some(&mut tape))?;
            let (dx, g) = mlp_vjp(&p(ts), &mut tape, u)?;
            Ok(vec![dx, g.fc1.weight, g.fc2.weight])
        }),
        rng,
    )
}

fn attention_case(causal: bool, rng: &mut Rng) -> Result<Vec<Check>> {
    let base = AttentionParams::randn(8, 2, causal, D, rng)?;
    let q = Tensor::randn(&[1, 3, 8], 1.0, D, rng)?;
    let kv = Tensor::randn(&[1, 3, 8], 1.0, D, rng)?;
    let p = move |ts: &[Tensor]| AttentionParams {
        wq: lin(&ts[2]),
        wk: lin(&ts[3]),
        wv: lin(&ts[4]),
        wo: lin(&ts[5]),
        n_heads: 2,
        causal,
    };
    let name = if causal { "attention_causal" } else { "attention" };
    check(
        name,
        &["q_src", "kv_src", "wq", "wk", "wv", "wo"],
        vec![q, kv, base.wq.weight, base.wk.weight, base.wv.weight, base.wo.weight],
        Box::new(move |ts| cross_attention_fwd(&ts[0], &ts[1], &p(ts), None)),
        Box::new(move |ts, u| {
            let mut tape = GradTape::new();
            cross_attention_fwd(&ts[0], &ts[1], &p(ts), Some(&mut tape))?;
            let (dq, dkv, g) = cross_attention_vjp(&p(ts), &mut tape, u)?;
            Ok(vec![dq, dkv, g.wq.weight, g.wk.weight, g.wv.weight, g.wo.weight])
        }),
        rng,
    )
}

/// Self-attention `f(x) = attn(x, x)`: the total input gradient must be the
/// sum of the query-path and key/value-path gradients computed separately.
fn attention_shared_input_case(rng: &mut Rng) -> Result<Vec<Check>> {
    let p = AttentionParams::randn(8, 2, true, D, rng)?;
    let x = Tensor::randn(&[2, 4, 8], 1.0, D, rng)?;
    let pf = p.clone();
    check(
        "attention_shared_input",
        &["x"],
        vec![x],
        Box::new(move |ts| cross_attention_fwd(&ts[0], &ts[0], &pf, None)),
        Box::new(move |ts, u| {
            let mut tape = GradTape::new();
            cross_attention_fwd(&ts[0], &ts[0], &p, Some(&mut tape))?;
            let (dq, dkv, _) = cross_attention_vjp(&p, &mut tape, u)?;
            Ok(vec![dq.add(&dkv)?])
        }),
        rng,
    )
}

fn moe_case(top_k: usize, rng: &mut Rng) -> Result<Vec<Check>> {
    let router = RouterParams::randn(4, 6, top_k, false, D, rng)?;
    let bank = ExpertBank::randn(4, 6, 8, D, rng)?;
    let x = Tensor::randn(&[5, 6], 1.0, D, rng)?;
    let ts = vec![
        x,
        router.gate_weight,
        bank.experts[0].fc1.weight.clone(),
        bank.experts[1].fc2.weight.clone(),
    ];
    let build = move |ts: &[Tensor]| {
        let r = RouterParams {
            gate_weight: ts[1].clone(),
            top_k,
            frozen: false,
        };
        let mut e = bank.clone();
        e.experts[0].fc1 = lin(&ts[2]);
        e.experts[1].fc2 = lin(&ts[3]);
        (r, e)
    };
    let b2 = build.clone();
    check(
        &format!("moe_top{top_k}"),
        &["x", "gate_weight", "expert0.fc1", "expert1.fc2"],
        ts,
        Box::new(move |ts| {
            let (r, e) = build(ts);
            moe_fwd(&ts[0], &r, &e, None)
        }),
        Box::new(move |ts, u| {
            let (r, e) = b2(ts);
            let mut tape = GradTape::new();
            moe_fwd(&ts[0], &r, &e, Some(&mut tape))?;
            let (dx, gr, ge) = moe_vjp(&r, &e, &mut tape, u)?;
            Ok(vec![dx, gr.gate_weight, ge.experts[0].fc1.weight.clone(), ge.experts[1].fc2.weight.clone()])
        }),
        rng,
    )
}

fn dims() -> BlockDims {
    BlockDims {
        d_model: 8,
        n_heads: 2,
        n_experts: 3,
        top_k: 2,
        d_ff: 8,
        causal: true,
        norm_eps: 1e-6,
    }
}

/// Selected block parameters exposed as a flat list for perturbation.
pub const BLOCK_PARAM_LABELS: [&str; 8] = [
    "norm_x1.gain",
    "norm_y1.gain",
    "attn.wq",
    "attn.wv",
    "attn_adapters.up_q",
    "attn_adapters.down",
    "mlp_adapters.up",
    "experts.0.fc1",
];

fn block_get(p: &BlockParams) -> Vec<Tensor> {
    vec![
        p.norm_x1.gain.clone(),
        p.norm_y1.gain.clone(),
        p.attn.wq.weight.clone(),
        p.attn.wv.weight.clone(),
        p.attn_adapters.up_q.weight.clone(),
        p.attn_adapters.down.weight.clone(),
        p.mlp_adapters.up.weight.clone(),
        p.experts.experts[0].fc1.weight.clone(),
    ]
}

fn block_set(p: &mut BlockParams, ts: &[Tensor]) {
    p.norm_x1.gain = ts[0].clone();
    p.norm_y1.gain = ts[1].clone();
    p.attn.wq.weight = ts[2].clone();
    p.attn.wv.weight = ts[3].clone();
    p.attn_adapters.up_q.weight = ts[4].clone();
    p.attn_adapters.down.weight = ts[5].clone();
    p.mlp_adapters.up.weight = ts[6].clone();
    p.experts.experts[0].fc1.weight = ts[7].clone();
}

/// A block with non-zero down projections and an unfrozen router.
pub fn random_block(rng: &mut Rng) -> Result<BlockParams> {
    let mut p = BlockParams::init(&dims(), D, rng)?;
    p.randomize_down_projections(0.3, rng)?;
    p.router.frozen = false;
    Ok(p)
}

fn branch_attn_case(rng: &mut Rng) -> Result<Vec<Check>> {
    let base = random_block(rng)?;
    let x1 = Tensor::randn(&[1, 4, 4], 1.0, D, rng)?;
    let x2 = Tensor::randn(&[1, 4, 4], 1.0, D, rng)?;
    let mut ts = vec![x1, x2];
    ts.extend(block_get(&base));
    let mut labels = vec!["x1", "x2"];
    labels.extend(BLOCK_PARAM_LABELS);
    let (b1, b2) = (base.clone(), base);
    check(
        "branch_attn",
        &labels,
        ts,
        Box::new(move |ts| {
            let mut p = b1.clone();
            block_set(&mut p, &ts[2..]);
            branch_attn(&ts[0], &ts[1], &p, None)
        }),
        Box::new(move |ts, u| {
            let mut p = b2.clone();
            block_set(&mut p, &ts[2..]);
            let mut tape = GradTape::new();
            branch_attn(&ts[0], &ts[1], &p, Some(&mut tape))?;
            let mut acc = p.zeros_like();
            let (d1, d2) = branch_attn_vjp(&p, &mut tape, u, &mut acc)?;
            let mut out = vec![d1, d2];
            out.extend(block_get(&acc));
            Ok(out)
        }),
        rng,
    )
    .map(|v| v.into_iter().filter(|c| !c.name.contains("norm_y1") && !c.name.contains("mlp_") && !c.name.contains("experts")).collect())
}

fn branch_mlp_case(rng: &mut Rng) -> Result<Vec<Check>> {
    let base = random_block(rng)?;
    let y = Tensor::randn(&[1, 4, 4], 1.0, D, rng)?;
    let (b1, b2) = (base.clone(), base.clone());
    let picks = [1usize, 6, 7];
    let mut ts = vec![y];
    let all = block_get(&base);
    ts.extend(picks.iter().map(|&i| all[i].clone()));
    let set = move |p: &mut BlockParams, ts: &[Tensor]| {
        let mut full = block_get(p);
        for (j, &i) in picks.iter().enumerate() {
            full[i] = ts[j].clone();
        }
        block_set(p, &full);
    };
    let set2 = set;
    check(
        "branch_mlp",
        &["y1", "norm_y1.gain", "mlp_adapters.up", "experts.0.fc1"],
        ts,
        Box::new(move |ts| {
            let mut p = b1.clone();
            set(&mut p, &ts[1..]);
            branch_mlp(&ts[0], &p, None)
        }),
        Box::new(move |ts, u| {
            let mut p = b2.clone();
            set2(&mut p, &ts[1..]);
            let mut tape = GradTape::new();
            branch_mlp(&ts[0], &p, Some(&mut tape))?;
            let mut acc = p.zeros_like();
            let dy = branch_mlp_vjp(&p, &mut tape, u, &mut acc)?;
            let g = block_get(&acc);
            Ok(vec![dy, g[1].clone(), g[6].clone(), g[7].clone()])
        }),
        rng,
    )
}

/// Full block as a function of both streams and selected parameters; the
/// output pair is flattened by concatenation.
fn block_case(v: CouplingVariant, rng: &mut Rng) -> Result<Vec<Check>> {
    let base = random_block(rng)?;
    let x1 = Tensor::randn(&[1, 3, 4], 1.0, D, rng)?;
    let x2 = Tensor::randn(&[1, 3, 4], 1.0, D, rng)?;
    let mut ts = vec![x1, x2];
    ts.extend(block_get(&base));
    let mut labels = vec!["x1", "x2"];
    labels.extend(BLOCK_PARAM_LABELS);
    let (b1, b2) = (base.clone(), base);
    check(
        &format!("block_{v}"),
        &labels,
        ts,
        Box::new(move |ts| {
            let mut p = b1.clone();
            block_set(&mut p, &ts[2..]);
            let y = block_fwd(&StreamPair::new(ts[0].clone(), ts[1].clone())?, &p, v)?;
            y.left.concat_last(&y.right)
        }),
        Box::new(move |ts, u| {
            let mut p = b2.clone();
            block_set(&mut p, &ts[2..]);
            let (u1, u2) = u.split_last(4)?;
            let x = StreamPair::new(ts[0].clone(), ts[1].clone())?;
            let out = block_vjp_from_input(x, &StreamPair::new(u1, u2)?, &p, v)?;
            let mut g = vec![out.grad_x.left, out.grad_x.right];
            g.extend(block_get(&out.grad_params));
            Ok(g)
        }),
        rng,
    )
}

/// Every primitive and composite VJP on one random draw.
pub fn fd_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    let mut all = Vec::new();
    all.extend(rmsnorm_case(&mut rng)?);
    all.extend(linear_case(&mut rng)?);
    all.extend(silu_case(&mut rng)?);
    all.extend(mlp_case(&mut rng)?);
    all.extend(attention_case(false, &mut rng)?);
    all.extend(attention_case(true, &mut rng)?);
    all.extend(attention_shared_input_case(&mut rng)?);
    all.extend(moe_case(4, &mut rng)?);
    all.extend(moe_case(2, &mut rng)?);
    all.extend(branch_attn_case(&mut rng)?);
    all.extend(branch_mlp_case(&mut rng)?);
    all.extend(block_case(CouplingVariant::PaperAsymmetric, &mut rng)?);
    all.extend(block_case(CouplingVariant::StrictRevnet, &mut rng)?);
    Ok(all)
}

/// A random small model with a batch to run it on.
pub struct TinyCase {
    pub cfg: revffn::model::ModelConfig,
    pub params: revffn::model::ModelParams,
    pub tokens: revffn::model::TokenBatch,
    pub targets: revffn::model::TokenBatch,
}

/// Dimensions drawn from d in {8, 16}, up to 3 layers, up to 4 experts,
/// S <= 6, B <= 3; down projections N(0, adapter_std^2).
pub fn random_tiny_model(seed: u64, coupling: CouplingVariant, inv_iters: usize, adapter_std: f64) -> Result<TinyCase> {
    use revffn::model::{ModelConfig, ModelParams, TokenBatch};
    let mut rng = Rng::new(seed).fork(0x71);
    let d = [8, 16][rng.below(2)];
    let n_heads = [1, 2][rng.below(2)];
    let n_experts = 2 + rng.below(3);
    let cfg = ModelConfig {
        vocab_size: 12 + rng.below(20),
        d_model: d,
        n_heads,
        n_layers: 1 + rng.below(3),
        n_experts,
        top_k: 1 + rng.below(n_experts),
        d_ff: [8, 16][rng.below(2)],
        max_seq_len: 8,
        coupling,
        inv_iters,
        inv_tolerance: 1e-3,
        precision: D,
        seed,
        causal: rng.below(2) == 0,
        norm_eps: 1e-6,
    };
    let mut params = ModelParams::init(&cfg)?;
    params.randomize_adapters(adapter_std, seed ^ 0xa5)?;
    let (b, s) = (1 + rng.below(3), 2 + rng.below(5));
    let tokens = TokenBatch::random(b, s, cfg.vocab_size, &mut rng)?;
    let targets = TokenBatch::random(b, s, cfg.vocab_size, &mut rng)?;
    Ok(TinyCase {
        cfg,
        params,
        tokens,
        targets,
    })
}
