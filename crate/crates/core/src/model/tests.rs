use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::fixed_point::UnrollMode;
use crate::tensor::{finite_difference_grad, Graph, Tensor, Var};
use crate::Error;

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| scale * (rng.gen::<f64>() * 2.0 - 1.0))
        .collect();
    Tensor::from_f64(shape, &data).unwrap()
}

fn micro(d: usize, hw: usize, classes: usize) -> GetConfig {
    GetConfig {
        image: ImageDims::new(hw, hw, 1),
        patch: 2,
        width: d,
        injection_depth: 1,
        equilibrium_depth: 2,
        expansion: 2,
        heads: 2,
        n_classes: classes,
        iterations: 2,
    }
}

/// Randomizes every learned tensor so zero-initialized layers do not mask bugs.
fn randomized(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for i in 0..p.len() {
        if p.is_learned(i) {
            let shape = p.tensors()[i].shape().to_vec();
            let base = p.tensors()[i].clone();
            p.tensors_mut()[i] = base.add(&random(&shape, 0.3, &mut rng)).unwrap();
        }
    }
    p
}

#[test]
fn patchify_examples() {
    let img =
        Tensor::<f64>::from_f64(&[4, 4, 1], &(0..16).map(f64::from).collect::<Vec<_>>()).unwrap();
    let p = patchify(&img, 2).unwrap();
    assert_eq!(p.shape(), &[4, 4]);
    assert_eq!(&p.data()[..4], &[0., 1., 4., 5.]);
    assert_eq!(&p.data()[4..8], &[2., 3., 6., 7.]);
    assert_eq!(unpatchify(&p, ImageDims::new(4, 4, 1), 2).unwrap(), img);

    let flat = patchify(&Tensor::<f64>::full(&[4, 4, 1], 0.7), 2).unwrap();
    for row in flat.data().chunks(4) {
        assert_eq!(row, &flat.data()[..4]);
    }

    let rgb =
        Tensor::<f64>::from_f64(&[2, 2, 3], &(0..12).map(f64::from).collect::<Vec<_>>()).unwrap();
    let one = patchify(&rgb, 2).unwrap();
    assert_eq!(one.shape(), &[1, 12]);
    assert_eq!(one.data(), rgb.data());
    assert_eq!(unpatchify(&one, ImageDims::new(2, 2, 3), 2).unwrap(), rgb);
}

#[test]
fn patchify_errors() {
    assert!(matches!(
        patchify(&Tensor::<f64>::zeros(&[5, 4, 1]), 2),
        Err(Error::Dimension(_))
    ));
    let wrong = Tensor::<f64>::zeros(&[3, 4]);
    assert!(matches!(
        unpatchify(&wrong, ImageDims::new(4, 4, 1), 2),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn batched_patchify_matches_per_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = random(&[3, 4, 6, 2], 1.0, &mut rng);
    let p = patchify(&batch, 2).unwrap();
    assert_eq!(p.shape(), &[3, 6, 8]);
    for b in 0..3 {
        let one = Tensor::new(&[4, 6, 2], batch.data()[b * 48..(b + 1) * 48].to_vec()).unwrap();
        assert_eq!(
            &p.data()[b * 48..(b + 1) * 48],
            patchify(&one, 2).unwrap().data()
        );
    }
    assert_eq!(unpatchify(&p, ImageDims::new(4, 6, 2), 2).unwrap(), batch);
}

#[test]
fn positional_encoding_examples() {
    let pe = sinusoidal_pos_encoding::<f64>(5, 8).unwrap();
    for j in 0..8 {
        assert_eq!(pe.data()[j], if j % 2 == 0 { 0.0 } else { 1.0 });
    }
    assert!((pe.data()[8] - 1f64.sin()).abs() < 1e-15);
    assert!((pe.data()[8] - 0.8415).abs() < 1e-4);
    assert_eq!(pe, sinusoidal_pos_encoding::<f64>(5, 8).unwrap());
    assert!(matches!(
        sinusoidal_pos_encoding::<f64>(5, 7),
        Err(Error::Config(_))
    ));
}

struct Attn {
    wi: Tensor<f64>,
    bi: Tensor<f64>,
    wo: Tensor<f64>,
    bo: Tensor<f64>,
}

fn attn_params(d: usize, rng: &mut ChaCha8Rng) -> Attn {
    Attn {
        wi: random(&[d, 3 * d], 0.5, rng),
        bi: random(&[3 * d], 0.5, rng),
        wo: random(&[d, d], 0.5, rng),
        bo: random(&[d], 0.5, rng),
    }
}

fn block_on(g: &mut Graph<f64>, a: &Attn, d: usize) -> BlockVars {
    let mut v: Vec<Var> = vec![
        g.param(Tensor::ones(&[d])),
        g.param(Tensor::zeros(&[d])),
        g.param(a.wi.clone()),
        g.param(a.bi.clone()),
        g.param(a.wo.clone()),
        g.param(a.bo.clone()),
    ];
    v.extend([g.param(Tensor::ones(&[d])), g.param(Tensor::zeros(&[d]))]);
    v.extend([
        g.param(Tensor::zeros(&[d, 2 * d])),
        g.param(Tensor::zeros(&[2 * d])),
        g.param(Tensor::zeros(&[2 * d, d])),
        g.param(Tensor::zeros(&[d])),
    ]);
    BlockVars::from_slice(&v).unwrap()
}

/// Multi-head attention written out with loops over heads, rows and columns.
fn reference_mha(
    z: &[f64],
    n: usize,
    d: usize,
    heads: usize,
    a: &Attn,
    u: Option<&[f64]>,
) -> Vec<f64> {
    let dh = d / heads;
    let proj = |i: usize, j: usize| -> f64 {
        let mut s = a.bi.data()[j];
        for l in 0..d {
            s += z[i * d + l] * a.wi.data()[l * 3 * d + j];
        }
        s + u.map_or(0.0, |u| u[(i * 3 * d + j) % u.len()])
    };
    let mut concat = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    (0..dh)
                        .map(|c| proj(i, h * dh + c) * proj(j, d + h * dh + c))
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let tot: f64 = e.iter().sum();
            for c in 0..dh {
                concat[i * d + h * dh + c] = (0..n)
                    .map(|j| e[j] / tot * proj(j, 2 * d + h * dh + c))
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] = a.bo.data()[j]
                + (0..d)
                    .map(|l| concat[i * d + l] * a.wo.data()[l * d + j])
                    .sum::<f64>();
        }
    }
    out
}

#[test]
fn zero_injection_matches_reference_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d, heads) = (5, 8, 2);
    let a = attn_params(d, &mut rng);
    let z = random(&[n, d], 1.0, &mut rng);
    let mut g = Graph::new();
    let p = block_on(&mut g, &a, d);
    let zv = g.constant(z.clone());
    let zero = g.constant(Tensor::zeros(&[1, 3 * d]));
    let with_zero = attention_with_injection(&mut g, zv, Some(zero), &p, heads).unwrap();
    let without = attention_with_injection(&mut g, zv, None, &p, heads).unwrap();
    let oracle = reference_mha(z.data(), n, d, heads, &a, None);
    assert_eq!(g.value(with_zero), g.value(without));
    for (x, y) in g.value(with_zero).data().iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-10, "{x} vs {y}");
    }

    let u = random(&[n, 3 * d], 1.0, &mut rng);
    let uv = g.constant(u.clone());
    let injected = attention_with_injection(&mut g, zv, Some(uv), &p, heads).unwrap();
    let oracle = reference_mha(z.data(), n, d, heads, &a, Some(u.data()));
    for (x, y) in g.value(injected).data().iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn single_token_attention_passes_values_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 4;
    let a = attn_params(d, &mut rng);
    let z = random(&[1, d], 1.0, &mut rng);
    let u = random(&[1, 3 * d], 1.0, &mut rng);
    let mut g = Graph::new();
    let p = block_on(&mut g, &a, d);
    let (zv, uv) = (g.constant(z.clone()), g.constant(u.clone()));
    let out = attention_with_injection(&mut g, zv, Some(uv), &p, 2).unwrap();
    let qkv = z.matmul(&a.wi).unwrap();
    let v: Vec<f64> = (0..d)
        .map(|j| qkv.data()[2 * d + j] + a.bi.data()[2 * d + j] + u.data()[2 * d + j])
        .collect();
    let expect = Tensor::from_f64(&[1, d], &v)
        .unwrap()
        .matmul(&a.wo)
        .unwrap()
        .add(&a.bo.clone().reshape(&[1, d]).unwrap())
        .unwrap();
    for (x, y) in g.value(out).data().iter().zip(expect.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn injected_scores_match_four_term_expansion() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, d) = (6, 4);
    let z = random(&[n, d], 1.0, &mut rng);
    let wi = random(&[d, 3 * d], 1.0, &mut rng);
    let u = random(&[n, 3 * d], 1.0, &mut rng);
    let slab = |m: &Tensor<f64>, s: usize| -> Tensor<f64> {
        let (rows, cols) = (m.shape()[0], m.shape()[1]);
        let data = (0..rows)
            .flat_map(|r| (0..d).map(move |c| (r, c)))
            .map(|(r, c)| m.data()[r * cols + s * d + c])
            .collect();
        Tensor::new(&[rows, d], data).unwrap()
    };
    let (wq, wk) = (slab(&wi, 0), slab(&wi, 1));
    let (uq, uk) = (slab(&u, 0), slab(&u, 1));

    let mut g = Graph::new();
    let (zv, wv, uv) = (
        g.constant(z.clone()),
        g.constant(wi.clone()),
        g.constant(u.clone()),
    );
    let proj = g.matmul(zv, wv).unwrap();
    let packed = g.add(proj, uv).unwrap();
    let packed = g.value(packed).clone();
    let (q, k) = (slab(&packed, 0), slab(&packed, 1));
    let lhs = q.matmul(&k.transpose2().unwrap()).unwrap();

    let zq = z.matmul(&wq).unwrap();
    let zk = z.matmul(&wk).unwrap();
    let terms = [
        zq.matmul(&zk.transpose2().unwrap()).unwrap(),
        zq.matmul(&uk.transpose2().unwrap()).unwrap(),
        uq.matmul(&zk.transpose2().unwrap()).unwrap(),
        uq.matmul(&uk.transpose2().unwrap()).unwrap(),
    ];
    let rhs = terms
        .iter()
        .skip(1)
        .fold(terms[0].clone(), |acc, t| acc.add(t).unwrap());
    for (x, y) in lhs.data().iter().zip(rhs.data()) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn injection_shape_mismatch_is_dimension_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = attn_params(4, &mut rng);
    let mut g = Graph::new();
    let p = block_on(&mut g, &a, 4);
    let z = g.constant(Tensor::zeros(&[3, 4]));
    let u = g.constant(Tensor::zeros(&[2, 12]));
    assert!(matches!(
        attention_with_injection(&mut g, z, Some(u), &p, 2),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn zero_output_layers_make_block_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 8;
    let mut a = attn_params(d, &mut rng);
    a.wo = Tensor::zeros(&[d, d]);
    a.bo = Tensor::zeros(&[d]);
    let z = random(&[2, 5, d], 1.0, &mut rng);
    let mut g = Graph::new();
    let p = block_on(&mut g, &a, d);
    let zv = g.constant(z.clone());
    let out = transformer_block(&mut g, zv, None, &p, 2).unwrap();
    assert_eq!(g.value(out), &z);
}

#[test]
fn block_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = 4;
    let mut tensors: Vec<Tensor<f64>> = vec![
        Tensor::ones(&[d])
            .add(&random(&[d], 0.2, &mut rng))
            .unwrap(),
        random(&[d], 0.2, &mut rng),
        random(&[d, 3 * d], 0.5, &mut rng),
        random(&[3 * d], 0.2, &mut rng),
        random(&[d, d], 0.5, &mut rng),
        random(&[d], 0.2, &mut rng),
        Tensor::ones(&[d])
            .add(&random(&[d], 0.2, &mut rng))
            .unwrap(),
        random(&[d], 0.2, &mut rng),
        random(&[d, 2 * d], 0.5, &mut rng),
        random(&[2 * d], 0.2, &mut rng),
        random(&[2 * d, d], 0.5, &mut rng),
        random(&[d], 0.2, &mut rng),
    ];
    tensors.push(random(&[3, d], 1.0, &mut rng));
    tensors.push(random(&[1, 3 * d], 0.5, &mut rng));
    let weights = random(&[3, d], 1.0, &mut rng);

    let eval = |ts: &[Tensor<f64>], g: &mut Graph<f64>| -> (Vec<Var>, Var) {
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let p = BlockVars::from_slice(&vars[..12]).unwrap();
        let out = transformer_block(g, vars[12], Some(vars[13]), &p, 2).unwrap();
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).unwrap();
        (vars, g.sum(prod).unwrap())
    };
    let mut g = Graph::new();
    let (vars, loss) = eval(&tensors, &mut g);
    g.backward(loss).unwrap();

    for (i, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).unwrap().clone();
        let fd = finite_difference_grad(
            |x| {
                let mut ts = tensors.clone();
                ts[i] = x.clone();
                let mut h = Graph::new();
                let (_, l) = eval(&ts, &mut h);
                Ok(h.value(l).item())
            },
            &tensors[i],
            1e-6,
        )
        .unwrap();
        let err = analytic.sub(&fd).unwrap().norm() / (fd.norm() + 1e-12);
        assert!(err < 1e-5, "input {i}: rel err {err}");
    }
}

#[test]
fn injection_transform_shapes_and_labels() {
    let cfg = micro(8, 4, 3);
    let mcfg = ModelConfig::Get(cfg.clone());
    let params = randomized(&mcfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = random(&[1, 4, 4, 1], 1.0, &mut rng);

    let run = |label: usize| -> Vec<Tensor<f64>> {
        let mut g = Graph::new();
        let vars = params.register(&mut g);
        let c = class_token(&mut g, &vars, 3, 8, 1, Some(&[label])).unwrap();
        let h = embed(&mut g, &vars, &noise, cfg.image, 2).unwrap();
        let ns = injection_transform(&mut g, &vars, &cfg, h, c).unwrap();
        ns.iter().map(|&v| g.value(v).clone()).collect()
    };
    let a = run(0);
    assert_eq!(a.len(), cfg.equilibrium_depth);
    assert!(a.iter().all(|t| t.shape() == [1, 4, 24]));
    assert_ne!(a, run(2));

    let ucfg = micro(8, 4, 0);
    let uparams = ModelParams::<f64>::init(&ModelConfig::Get(ucfg.clone()), 3).unwrap();
    let mut g = Graph::new();
    let vars = uparams.register(&mut g);
    let h = embed(&mut g, &vars, &noise, ucfg.image, 2).unwrap();
    let c = g.constant(Tensor::zeros(&[1, 1, 24]));
    assert!(matches!(
        injection_transform(&mut g, &vars, &ucfg, h, Some(c)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn get_forward_shape_determinism_and_contracts() {
    let cfg = ModelConfig::Get(micro(8, 4, 2));
    let model = Model {
        config: cfg.clone(),
        params: randomized(&cfg, 5),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let noise = random(&[2, 4, 4, 1], 1.0, &mut rng);
    let a = model.generate(&noise, Some(&[0, 1]), 2).unwrap();
    assert_eq!(a.shape(), noise.shape());
    assert_eq!(a, model.generate(&noise, Some(&[0, 1]), 2).unwrap());
    assert!(matches!(
        model.generate(&noise, Some(&[0, 2]), 2),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        model.generate(&noise, None, 2),
        Err(Error::Contract(_))
    ));

    let ucfg = ModelConfig::Get(micro(8, 4, 0));
    let umodel = Model {
        config: ucfg.clone(),
        params: randomized(&ucfg, 5),
    };
    assert!(matches!(
        umodel.generate(&noise, Some(&[0, 0]), 2),
        Err(Error::Contract(_))
    ));
    let k2 = umodel.generate(&noise, None, 2).unwrap();
    let k6 = umodel.generate(&noise, None, 6).unwrap();
    assert_ne!(k2, k6);
}

#[test]
fn checkpointed_forward_matches_plain() {
    let cfg = micro(8, 4, 0);
    let mcfg = ModelConfig::Get(cfg.clone());
    let params = randomized(&mcfg, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let noise = random(&[2, 4, 4, 1], 1.0, &mut rng);
    let run = |mode| {
        let mut g = Graph::new();
        let vars = params.register(&mut g);
        let out = get_forward(&mut g, &vars, &cfg, &noise, None, 3, mode).unwrap();
        let a = g.abs(out).unwrap();
        let loss = g.mean(a).unwrap();
        g.backward(loss).unwrap();
        let grads: Vec<_> = vars.vars().iter().map(|&v| g.grad(v).cloned()).collect();
        (g.value(out).clone(), grads)
    };
    let (plain, ck) = (run(UnrollMode::Plain), run(UnrollMode::Checkpointed));
    assert_eq!(plain.0, ck.0);
    let bits = |gs: &[Option<Tensor<f64>>]| -> Vec<Option<Vec<u64>>> {
        gs.iter()
            .map(|g| {
                g.as_ref()
                    .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
            })
            .collect()
    };
    assert_eq!(bits(&plain.1), bits(&ck.1));
}

#[test]
fn equilibrium_iterations_share_weights() {
    let cfg = micro(8, 4, 0);
    let mcfg = ModelConfig::Get(cfg.clone());
    let mut params = randomized(&mcfg, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let noise = random(&[1, 4, 4, 1], 1.0, &mut rng);

    let manual = |params: &ModelParams<f64>, k: usize| {
        let mut g = Graph::new();
        let vars = params.register(&mut g);
        let h = embed(&mut g, &vars, &noise, cfg.image, 2).unwrap();
        let ns = injection_transform(&mut g, &vars, &cfg, h, None).unwrap();
        let inputs = equilibrium_inputs(&mut g, &vars, &cfg, &ns, None).unwrap();
        let step = equilibrium_step::<f64>(cfg.equilibrium_depth, cfg.heads);
        let mut z = g.constant(Tensor::zeros(&[1, 4, 8]));
        for _ in 0..k {
            z = step(&mut g, z, &inputs).unwrap();
        }
        g.value(z).clone()
    };
    let unrolled = |params: &ModelParams<f64>, k: usize| {
        let mut g = Graph::new();
        let vars = params.register(&mut g);
        let out = get_forward(&mut g, &vars, &cfg, &noise, None, k, UnrollMode::Plain).unwrap();
        g.value(out).clone()
    };
    let before = (manual(&params, 3), unrolled(&params, 3));
    let w = params.get("eq.0.attn.qkv.weight").unwrap().map(|x| x * 1.5);
    params.set("eq.0.attn.qkv.weight", w).unwrap();
    let after = (manual(&params, 3), unrolled(&params, 3));
    assert_ne!(before.0, after.0);
    assert_ne!(before.1, after.1);
    // The same mutated storage drives each of the three applications.
    assert_ne!(manual(&params, 1), manual(&params, 3));
}

#[test]
fn vit_forward_contracts() {
    let cfg = VitConfig {
        image: ImageDims::new(4, 4, 1),
        patch: 2,
        width: 8,
        depth: 1,
        heads: 2,
        n_classes: 0,
    };
    let mcfg = ModelConfig::Vit(cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let noise = random(&[2, 4, 4, 1], 1.0, &mut rng);
    let model = Model {
        config: mcfg.clone(),
        params: randomized(&mcfg, 42),
    };
    let a = model.generate(&noise, None, 1).unwrap();
    assert_eq!(a.shape(), noise.shape());
    assert_eq!(a, model.generate(&noise, None, 1).unwrap());

    // With the block's residual branches zeroed the decoder sees the embedding.
    let mut p = model.params.clone();
    for name in [
        "blocks.0.attn.proj.weight",
        "blocks.0.attn.proj.bias",
        "blocks.0.mlp.fc2.weight",
        "blocks.0.mlp.fc2.bias",
    ] {
        let zero = Tensor::zeros(p.get(name).unwrap().shape());
        p.set(name, zero).unwrap();
    }
    let zeroed = Model {
        config: mcfg,
        params: p.clone(),
    };
    let out = zeroed.generate(&noise, None, 1).unwrap();
    let mut g = Graph::new();
    let vars = p.register(&mut g);
    let h = embed(&mut g, &vars, &noise, cfg.image, 2).unwrap();
    let ln = g
        .layer_norm(
            h,
            vars.get("final_norm.gamma").unwrap(),
            vars.get("final_norm.beta").unwrap(),
            LN_EPS,
        )
        .unwrap();
    let dec = g
        .linear(
            ln,
            vars.get("decoder.weight").unwrap(),
            vars.get("decoder.bias").unwrap(),
        )
        .unwrap();
    let img = unpatchify(g.value(dec), cfg.image, 2).unwrap();
    assert_eq!(out, img);
}

#[test]
fn default_init_has_zero_decoder() {
    let cfg = ModelConfig::Get(micro(8, 4, 0));
    let model = Model::<f64>::init(cfg, 1).unwrap();
    let noise = Tensor::ones(&[1, 4, 4, 1]);
    assert!(model
        .generate(&noise, None, 2)
        .unwrap()
        .data()
        .iter()
        .all(|&x| x == 0.0));
    let w = model.params.get("inj.0.attn.qkv.weight").unwrap();
    assert!(w.data().iter().all(|x| x.abs() <= 0.04) && w.max_abs() > 0.0);
}

fn within(x: u64, target: f64, rel: f64) -> bool {
    ((x as f64 - target) / target).abs() <= rel
}

#[test]
fn parameter_counts() {
    let tiny = count_params(&ModelConfig::Get(GetConfig::tiny()));
    assert!(within(tiny, 8.9e6, 0.05), "{tiny}");
    let vit_b = count_params(&ModelConfig::Vit(VitConfig::base()));
    assert!(within(vit_b, 85.2e6, 0.05), "{vit_b}");

    let mut narrow = GetConfig::tiny();
    narrow.image = ImageDims::new(4, 4, 1);
    let mut wide = narrow.clone();
    wide.width *= 2;
    wide.heads *= 2;
    let ratio = count_params(&ModelConfig::Get(wide)) as f64
        / count_params(&ModelConfig::Get(narrow)) as f64;
    assert!((ratio - 4.0).abs() < 0.05, "{ratio}");
}

#[test]
fn count_matches_registered_elements() {
    let mut cond = GetConfig::micro();
    cond.n_classes = 8;
    let vit = VitConfig {
        image: ImageDims::new(8, 8, 3),
        patch: 4,
        width: 32,
        depth: 3,
        heads: 2,
        n_classes: 5,
    };
    for cfg in [
        ModelConfig::Get(GetConfig::micro()),
        ModelConfig::Get(cond),
        ModelConfig::Get(micro(8, 4, 0)),
        ModelConfig::Vit(vit),
        ModelConfig::Get(GetConfig::tiny()),
    ] {
        let p = ModelParams::<f32>::zeros_like_config(&cfg).unwrap();
        assert_eq!(count_params(&cfg), p.learned_elements() as u64);
        assert_eq!(
            p.registered_elements() - p.learned_elements(),
            p.get(POS_EMBED).unwrap().numel()
        );
    }
}

#[test]
fn flop_counts() {
    let vit_b = count_flops(&ModelConfig::Vit(VitConfig::base()), 1);
    assert!(within(vit_b, 23.0e9, 0.10), "{vit_b}");
    let mini = count_flops(&ModelConfig::Get(GetConfig::mini()), 6);
    assert!(within(mini, 15.2e9, 0.10), "{mini}");

    let cfg = ModelConfig::Get(GetConfig::tiny());
    let k1 = count_flops(&cfg, 1);
    let k6 = count_flops(&cfg, 6);
    let eq = equilibrium_macs(&GetConfig::tiny());
    assert_eq!(k6 - k1, 5 * eq);
    assert_eq!(k1 - eq, count_flops(&cfg, 0));
}

#[test]
fn config_validation() {
    let mut c = GetConfig::micro();
    c.width = 30;
    c.heads = 4;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = GetConfig::micro();
    c.iterations = 0;
    assert!(c.validate().is_err());
    let mut c = GetConfig::micro();
    c.patch = 3;
    assert!(matches!(c.validate(), Err(Error::Dimension(_))));
    assert_eq!(default_heads(32), 1);
    assert_eq!(default_heads(768), 12);
    let a = ModelConfig::Get(GetConfig::micro());
    let mut b = GetConfig::micro();
    b.n_classes = 8;
    assert_ne!(a.hash(), ModelConfig::Get(b).hash());
    assert_eq!(a.hash(), ModelConfig::Get(GetConfig::micro()).hash());
}
