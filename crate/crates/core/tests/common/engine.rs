//! A naive re-implementation of the forward pass on nested `Vec`s, written
//! straight from the block equations, plus the engine-level checks shared by
//! the integration tests and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracelens::interventions::{knockout_window, patch_positions, sublayer_knockout, KnockoutWindow};
use tracelens::lens::{detect_extraction, head_mapping_scores, project_to_vocab};
use tracelens::model::{Activation, HeadKind, Layout, ModelConfig, Norm, TraceGauges};
use tracelens::synthetic::{random_tokens, random_transformer};
use tracelens::{Error, InterventionPlan, SublayerKind, Transformer64};

type Rows = Vec<Vec<f64>>;

pub struct BruteTrace {
    pub residuals: Vec<Rows>,
    /// `[layer - 1][head][query][key]`
    pub attention: Vec<Vec<Rows>>,
    pub attn_updates: Vec<Rows>,
    pub mlp_updates: Vec<Rows>,
}

fn norm(x: &[f64], n: &Norm<f64>, eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    x.iter().enumerate().map(|(k, v)| (v - mean) / (var + eps).sqrt() * n.scale[k] + n.bias[k]).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Returns `None` when some attention row has every entry blocked.
pub fn brute_forward(model: &Transformer64, tokens: &[u32], plan: &InterventionPlan) -> Option<BruteTrace> {
    let c = &model.config;
    let w = &model.weights;
    let (n, d, hd) = (tokens.len(), c.d_model, c.head_dim());
    let eps = c.norm_epsilon;
    let x0: Rows = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| (0..d).map(|k| w.embedding.get(t as usize, k) + w.position_embedding.get(i, k)).collect())
        .collect();
    let mut out = BruteTrace { residuals: vec![x0], attention: vec![], attn_updates: vec![], mlp_updates: vec![] };
    for layer in 1..=c.n_layers {
        let lw = &w.layers[layer - 1];
        let x = out.residuals[layer - 1].clone();
        let xn: Rows = x.iter().map(|r| norm(r, &lw.attn_norm, eps)).collect();
        let kv_in: Rows = (0..n)
            .map(|i| {
                plan.patches
                    .iter()
                    .find(|p| p.position == i && p.source_layer < layer)
                    .map_or(xn[i].clone(), |p| norm(&out.residuals[p.source_layer][i], &lw.attn_norm, eps))
            })
            .collect();
        let proj = |rows: &Rows, m: &tracelens::Matrix64, b: &[f64]| -> Rows {
            rows.iter().map(|r| (0..d).map(|o| b[o] + (0..d).map(|k| r[k] * m.get(k, o)).sum::<f64>()).collect()).collect()
        };
        let q = proj(&xn, &lw.w_q, &lw.b_q);
        let k = proj(&kv_in, &lw.w_k, &lw.b_k);
        let v = proj(&kv_in, &lw.w_v, &lw.b_v);
        let blocked = |r: usize, col: usize| {
            col > r || plan.attention_blocks.iter().any(|b| b.layer == layer && b.query == r && b.key == col)
        };
        let mut heads = Vec::new();
        let mut a = vec![lw.b_o.clone(); n];
        for j in 0..c.n_heads {
            let mut weights = vec![vec![0.0; n]; n];
            for r in 0..n {
                let scores: Vec<Option<f64>> = (0..n)
                    .map(|col| {
                        (!blocked(r, col)).then(|| {
                            (0..hd).map(|t| q[r][j * hd + t] * k[col][j * hd + t]).sum::<f64>() / (hd as f64).sqrt()
                        })
                    })
                    .collect();
                let max = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return None;
                }
                let total: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
                for col in 0..n {
                    if let Some(s) = scores[col] {
                        weights[r][col] = (s - max).exp() / total;
                    }
                }
                for col in 0..n {
                    for o in 0..d {
                        let z: f64 = (0..hd).map(|t| v[col][j * hd + t] * lw.w_o.get(j * hd + t, o)).sum();
                        a[r][o] += weights[r][col] * z;
                    }
                }
            }
            heads.push(weights);
        }
        let zeroed = |kind, i| plan.sublayer_zeroings.iter().any(|z| z.kind == kind && z.layer == layer && z.position == i);
        for (i, row) in a.iter_mut().enumerate() {
            if zeroed(SublayerKind::Mhsa, i) {
                row.fill(0.0);
            }
        }
        let mut m = vec![vec![0.0; d]; n];
        for i in 0..n {
            if zeroed(SublayerKind::Mlp, i) {
                continue;
            }
            let pre: Vec<f64> = match c.layout {
                Layout::Serial => (0..d).map(|k| x[i][k] + a[i][k]).collect(),
                Layout::Parallel => x[i].clone(),
            };
            let h = norm(&pre, &lw.mlp_norm, eps);
            let act: Vec<f64> = (0..c.d_inner)
                .map(|u| {
                    let p = lw.b_in[u] + (0..d).map(|k| lw.w_in.get(u, k) * h[k]).sum::<f64>();
                    match c.activation {
                        Activation::Gelu => gelu(p),
                        Activation::Relu => p.max(0.0),
                    }
                })
                .collect();
            for o in 0..d {
                m[i][o] = lw.b_out[o] + (0..c.d_inner).map(|u| lw.w_out.get(o, u) * act[u]).sum::<f64>();
            }
        }
        let next: Rows = (0..n).map(|i| (0..d).map(|k| x[i][k] + a[i][k] + m[i][k]).collect()).collect();
        out.residuals.push(next);
        out.attention.push(heads);
        out.attn_updates.push(a);
        out.mlp_updates.push(m);
    }
    Some(out)
}

/// Logits `δ(h)` recomputed by hand.
pub fn brute_logits(model: &Transformer64, hidden: &[f64]) -> Vec<f64> {
    let h = norm(hidden, &model.weights.final_norm, model.config.norm_epsilon);
    let (m, bias) = match (&model.config.head_kind, &model.weights.head) {
        (HeadKind::LinearHead, Some(head)) => (&head.weight, Some(&head.bias)),
        _ => (&model.weights.embedding, None),
    };
    (0..model.config.vocab_size)
        .map(|t| (0..h.len()).map(|k| m.get(t, k) * h[k]).sum::<f64>() + bias.map_or(0.0, |b| b[t]))
        .collect()
}

/// Lowest index among the maxima.
pub fn brute_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn random_config(rng: &mut impl Rng, max_layers: usize, max_d: usize) -> ModelConfig {
    let d_choices: Vec<usize> = [4usize, 8, 16].into_iter().filter(|&d| d <= max_d).collect();
    let d = d_choices[rng.random_range(0..d_choices.len())];
    let heads: Vec<usize> = [1usize, 2, 4].into_iter().filter(|h| d % h == 0).collect();
    let mut c = ModelConfig::tiny(rng.random_range(1..=max_layers), heads[rng.random_range(0..heads.len())], d, 24);
    if rng.random_bool(0.5) {
        c.head_kind = HeadKind::LinearHead;
    }
    c
}

/// Random attention blocks that never empty a row.
pub fn random_blocks(rng: &mut impl Rng, config: &ModelConfig, n: usize) -> InterventionPlan {
    let mut plan = InterventionPlan::new();
    for layer in 1..=config.n_layers {
        for r in 1..n {
            for c in 0..r {
                if rng.random_bool(0.3) {
                    plan.block(layer, r, c).unwrap();
                }
            }
        }
    }
    plan
}

/// Residual reconstruction on random serial f32 models.
pub fn check_residual_reconstruction(cases: u64) -> Result<(), String> {
    let mut worst = 0.0f64;
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut config = random_config(&mut rng, 4, 16);
        config.layout = Layout::Serial;
        let model = random_transformer::<f32>(&config, seed);
        let n = rng.random_range(1..=8);
        let tokens = random_tokens(&mut rng, n, config.vocab_size);
        let trace = model.forward(&tokens, &InterventionPlan::new(), TraceGauges::MINIMAL).map_err(|e| e.to_string())?;
        for i in 0..n {
            for k in 0..config.d_model {
                let sum: f32 = (1..=config.n_layers).map(|l| trace.attn_update(l).get(i, k) + trace.mlp_update(l).get(i, k)).sum();
                let diff = (trace.residual(config.n_layers).get(i, k) - trace.residual(0).get(i, k) - sum).abs() as f64;
                worst = worst.max(diff);
            }
        }
    }
    ensure(worst < 1e-5, || format!("max residual reconstruction error {worst:e}"))
}

/// Head decomposition, row sums, exact zeros and a brute-force softmax with
/// edited masks.
pub fn check_attention_algebra(cases: u64) -> Result<(), String> {
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let config = random_config(&mut rng, 3, 16);
        let n = rng.random_range(1..=6);
        let tokens = random_tokens(&mut rng, n, config.vocab_size);
        let plan = random_blocks(&mut rng, &config, n);

        let m32 = random_transformer::<f32>(&config, seed);
        let t32 = m32.forward(&tokens, &plan, TraceGauges::FULL).map_err(|e| e.to_string())?;
        for l in 1..=config.n_layers {
            let mut sum = tracelens::Matrix::<f32>::zeros(n, config.d_model);
            for c in &t32.head_contributions[l - 1] {
                sum.add_assign(c);
            }
            sum.add_row_vector(&m32.weights.layers[l - 1].b_o);
            let err = sum.max_abs_diff(t32.attn_update(l));
            ensure(err < 1e-5, || format!("seed {seed} layer {l}: head decomposition error {err:e}"))?;
            for j in 0..config.n_heads {
                let a = t32.attention(l, j).unwrap();
                for r in 0..n {
                    let s: f64 = a.row(r).iter().map(|&v| v as f64).sum();
                    ensure((s - 1.0).abs() < 1e-6, || format!("seed {seed}: row {r} sums to {s}"))?;
                    for c in 0..n {
                        let blocked = c > r || plan.blocks_at(l).any(|b| b.query == r && b.key == c);
                        ensure(!blocked || a.get(r, c) == 0.0, || format!("seed {seed}: nonzero blocked entry ({r},{c})"))?;
                    }
                }
            }
        }

        let m64 = random_transformer::<f64>(&config, seed);
        let t64 = m64.forward(&tokens, &plan, TraceGauges::FULL).map_err(|e| e.to_string())?;
        let brute = brute_forward(&m64, &tokens, &plan).ok_or("oracle found an empty row")?;
        for l in 1..=config.n_layers {
            for j in 0..config.n_heads {
                let a = t64.attention(l, j).unwrap();
                for r in 0..n {
                    for c in 0..n {
                        let e = brute.attention[l - 1][j][r][c];
                        ensure((a.get(r, c) - e).abs() < 1e-10, || format!("seed {seed}: weight ({l},{j},{r},{c})"))?;
                        ensure((e == 0.0) == (a.get(r, c) == 0.0), || format!("seed {seed}: zero pattern ({r},{c})"))?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn bit_equal<T: PartialEq>(a: &[T], b: &[T]) -> bool {
    a == b
}

/// Empty plan, zero-everything, late patching and sublayer spans.
pub fn check_intervention_identities(cases: u64) -> Result<(), String> {
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut config = random_config(&mut rng, 4, 16);
        if rng.random_bool(0.5) {
            config.layout = Layout::Parallel;
        }
        let l_total = config.n_layers;
        let model = random_transformer::<f32>(&config, seed);
        let n = rng.random_range(1..=8);
        let tokens = random_tokens(&mut rng, n, config.vocab_size);
        let empty = InterventionPlan::new();
        let a = model.forward(&tokens, &empty, TraceGauges::FULL).map_err(|e| e.to_string())?;
        let b = model.forward(&tokens, &InterventionPlan::default(), TraceGauges::FULL).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("seed {seed}: empty plan changed the trace"))?;
        let merged = empty.clone().merge(&InterventionPlan::new());
        let c = model.forward(&tokens, &merged, TraceGauges::FULL).map_err(|e| e.to_string())?;
        ensure(a == c, || format!("seed {seed}: merged empty plan changed the trace"))?;

        let mut zero_all = InterventionPlan::new();
        for l in 1..=l_total {
            for i in 0..n {
                zero_all.zero(SublayerKind::Mhsa, l, i).zero(SublayerKind::Mlp, l, i);
            }
        }
        let z = model.forward(&tokens, &zero_all, TraceGauges::MINIMAL).map_err(|e| e.to_string())?;
        ensure(
            bit_equal(z.residual(l_total).as_slice(), z.residual(0).as_slice()),
            || format!("seed {seed}: x^L != x^0 with every sublayer zeroed"),
        )?;

        let positions: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
        for src in [l_total - 1, l_total.saturating_sub(2)] {
            let plan = patch_positions(&positions, src, &config).map_err(|e| e.to_string())?;
            let p = model.forward(&tokens, &plan, TraceGauges::FULL).map_err(|e| e.to_string())?;
            // Layers 1..=src run before any patch applies.
            for l in 0..=src.min(l_total) {
                ensure(p.residual(l) == a.residual(l), || format!("seed {seed} src {src}: x^{l} changed"))?;
            }
            for l in 1..=src {
                ensure(p.attn_update(l) == a.attn_update(l) && p.mlp_update(l) == a.mlp_update(l), || {
                    format!("seed {seed} src {src}: layer {l} updates changed")
                })?;
                ensure(p.attention_weights[l - 1] == a.attention_weights[l - 1], || {
                    format!("seed {seed} src {src}: layer {l} weights changed")
                })?;
            }
            if src == l_total - 1 {
                // Layer L already reads x^{L-1}, so nothing at all may move.
                ensure(p.residuals == a.residuals && p.attention_weights == a.attention_weights, || {
                    format!("seed {seed}: patching from L-1 changed layer L")
                })?;
            }
        }

        for start in 1..=l_total {
            for kind in [SublayerKind::Mhsa, SublayerKind::Mlp] {
                let plan = sublayer_knockout(kind, start, 0, &config).map_err(|e| e.to_string())?;
                let layers: Vec<usize> = plan.sublayer_zeroings.iter().map(|z| z.layer).collect();
                let expected: Vec<usize> = (start..=(start + 9).min(l_total)).collect();
                ensure(layers == expected, || format!("start {start}: layers {layers:?}"))?;
            }
        }
    }
    // Long models exercise the `+ 9` cap.
    let config = ModelConfig::tiny(48, 1, 4, 8);
    for start in 1..=48 {
        let plan = sublayer_knockout(SublayerKind::Mlp, start, 0, &config).map_err(|e| e.to_string())?;
        let layers: Vec<usize> = plan.sublayer_zeroings.iter().map(|z| z.layer).collect();
        let expected: Vec<usize> = (start..=(start + 9).min(48)).collect();
        ensure(layers == expected, || format!("L=48 start {start}: layers {layers:?}"))?;
    }
    Ok(())
}

/// Patched and knocked-out forward passes agree with the naive oracle.
pub fn check_against_oracle(cases: u64) -> Result<(), String> {
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut config = random_config(&mut rng, 3, 8);
        if rng.random_bool(0.4) {
            config.layout = Layout::Parallel;
        }
        if rng.random_bool(0.3) {
            config.activation = Activation::Relu;
        }
        let model = random_transformer::<f64>(&config, seed);
        let n = rng.random_range(1..=6);
        let tokens = random_tokens(&mut rng, n, config.vocab_size);
        let mut plan = random_blocks(&mut rng, &config, n);
        if n > 1 {
            let center = rng.random_range(1..=config.n_layers);
            plan = plan.merge(
                &knockout_window(&KnockoutWindow { center_layer: center, width: 3, source_positions: vec![0], target_position: n - 1 }, &config)
                    .map_err(|e| e.to_string())?,
            );
        }
        for i in 0..n {
            if rng.random_bool(0.2) {
                plan.zero(SublayerKind::Mlp, rng.random_range(1..=config.n_layers), i);
            }
            if rng.random_bool(0.2) {
                plan.zero(SublayerKind::Mhsa, rng.random_range(1..=config.n_layers), i);
            }
            if rng.random_bool(0.3) {
                plan.patch(i, rng.random_range(0..config.n_layers));
            }
        }
        let got = model.forward(&tokens, &plan, TraceGauges::MINIMAL);
        let Some(brute) = brute_forward(&model, &tokens, &plan) else {
            ensure(matches!(got, Err(Error::FullyMaskedRow { .. })), || format!("seed {seed}: expected a fully masked row"))?;
            continue;
        };
        let got = got.map_err(|e| format!("seed {seed}: {e}"))?;
        for l in 0..=config.n_layers {
            for i in 0..n {
                for k in 0..config.d_model {
                    let (x, e) = (got.residual(l).get(i, k), brute.residuals[l][i][k]);
                    ensure((x - e).abs() < 1e-9, || format!("seed {seed}: x^{l}[{i}][{k}] {x} vs {e}"))?;
                }
            }
        }
        let logits = brute_logits(&model, &brute.residuals[config.n_layers][n - 1]);
        ensure(got.predicted_token() as usize == brute_argmax(&logits), || format!("seed {seed}: prediction differs"))?;
    }
    Ok(())
}

/// Logit lens vs. the model's own distribution, extraction vs. brute
/// argmax, and head mappings vs. materialized `E W_V W_O Eᵀ`.
pub fn check_lens_oracles() -> Result<(), String> {
    // 100 random states
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let config = random_config(&mut rng, 3, 16);
        let model = random_transformer::<f64>(&config, seed);
        let n = rng.random_range(1..=6);
        let tokens = random_tokens(&mut rng, n, config.vocab_size);
        let trace = model.forward(&tokens, &InterventionPlan::new(), TraceGauges::MINIMAL).map_err(|e| e.to_string())?;
        let pos = rng.random_range(0..n);
        let lens = project_to_vocab(&model, trace.residual(config.n_layers).row(pos), config.vocab_size).ids();
        let dist = model.predict_distribution(&trace, pos).map_err(|e| e.to_string())?;
        let mut order: Vec<usize> = (0..dist.len()).collect();
        order.sort_by(|&a, &b| dist[b].partial_cmp(&dist[a]).unwrap().then(a.cmp(&b)));
        let order: Vec<u32> = order.into_iter().map(|i| i as u32).collect();
        ensure(lens == order, || format!("seed {seed}: logit lens ranking differs from the distribution"))?;
    }

    // 1000 (trace, layer) samples
    let mut samples = 0;
    let mut seed = 0u64;
    while samples < 1000 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        seed += 1;
        let config = random_config(&mut rng, 4, 8);
        let model = random_transformer::<f64>(&config, seed);
        let n = rng.random_range(1..=6);
        let tokens = random_tokens(&mut rng, n, config.vocab_size);
        let trace = model.forward(&tokens, &InterventionPlan::new(), TraceGauges::MINIMAL).map_err(|e| e.to_string())?;
        let brute = brute_forward(&model, &tokens, &InterventionPlan::new()).unwrap();
        let t_star = brute_argmax(&brute_logits(&model, &brute.residuals[config.n_layers][n - 1]));
        for layer in 1..=config.n_layers {
            for kind in [SublayerKind::Mhsa, SublayerKind::Mlp] {
                let update = match kind {
                    SublayerKind::Mhsa => &brute.attn_updates[layer - 1][n - 1],
                    SublayerKind::Mlp => &brute.mlp_updates[layer - 1][n - 1],
                };
                let scores: Vec<f64> = (0..config.vocab_size)
                    .map(|t| (0..config.d_model).map(|k| model.weights.embedding.get(t, k) * update[k]).sum())
                    .collect();
                let t_prime = brute_argmax(&scores);
                let event = detect_extraction(&model, &trace, layer, kind);
                ensure(event.t_star as usize == t_star && event.t_prime as usize == t_prime, || {
                    format!("sample {samples}: event {event:?} vs ({t_star}, {t_prime})")
                })?;
                ensure(event.matched == (t_star == t_prime), || format!("sample {samples}: matched flag"))?;
                samples += 1;
            }
        }
    }

    // Materialized G for small vocabularies
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let mut config = random_config(&mut rng, 2, 16);
        config.vocab_size = rng.random_range(2..=64);
        let model = random_transformer::<f32>(&config, seed);
        let hd = config.head_dim();
        let e = &model.weights.embedding;
        for layer in 1..=config.n_layers {
            let lw = &model.weights.layers[layer - 1];
            for j in 0..config.n_heads {
                let ov = lw.w_v_head(j, hd).matmul(&lw.w_o_head(j, hd));
                let g = e.matmul(&ov).matmul_t(e);
                for t in 0..config.vocab_size as u32 {
                    let row = head_mapping_scores(&model, layer, j, t).map_err(|e| e.to_string())?;
                    for (u, &s) in row.iter().enumerate() {
                        let diff = (s - g.get(t as usize, u)).abs();
                        ensure(diff < 1e-5, || format!("G[{layer},{j}] ({t},{u}) off by {diff:e}"))?;
                    }
                }
            }
        }
    }
    Ok(())
}
