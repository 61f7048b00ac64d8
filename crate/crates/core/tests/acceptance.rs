//! Acceptance suite: one test per release criterion, each printing a PASS
//! line with its measured numbers. Training criteria run the bundled
//! fixtures end to end through the CLI layer.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use readvqa::cli::{cmd_eval, cmd_train, Profile, RunConfig};
use readvqa::model::{
    c2q_attention, classification_head, decode_span, embed_tokens, encoder_forward, fuse, highway,
    init_parameters, multichoice_head, pooled_query_vector, q2c_attention, similarity_matrix,
    span_head, span_loss, Bound, EncoderStack, ModelConfig, TaskMode,
};
use readvqa::retrieval::{content_tokens, Fact, FactIndex};
use readvqa::tensor::{grad_check, Graph, NodeId, Tensor};
use readvqa::text::{normalize_answer, EmbeddingTable, QAExample, QType, TokenizedText, Vocabulary};
use readvqa::train::{evaluate, Predictor, Schedule, TrainConfig};

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

// ── Criterion 1: gradient suite ─────────────────────────────────────────

fn check<F>(name: &str, seed: u64, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&Graph<f64>, &[NodeId]) -> readvqa::Result<NodeId>,
{
    let report = grad_check(f, inputs, 1e-5, 1e-4).unwrap();
    assert!(
        report.passed(),
        "{name} (seed {seed}): max rel err {}",
        report.max_rel_err
    );
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    for seed in 0..20u64 {
        let mut rng = rng_for(seed);
        let n = rng.random_range(2..5usize);
        let m = rng.random_range(2..5usize);
        let d = 2 * rng.random_range(1..3usize);

        // primitive differentiable ops
        let a = uniform(vec![n, m], -1.0, 1.0, &mut rng);
        let b = uniform(vec![m, d], -1.0, 1.0, &mut rng);
        check("matmul", seed, &[a.clone(), b.clone()], |g, xs| {
            g.sum(g.matmul(xs[0], xs[1])?)
        });
        let c = uniform(vec![n, m], -1.0, 1.0, &mut rng);
        let row = uniform(vec![m], -1.0, 1.0, &mut rng);
        check("add-broadcast", seed, &[a.clone(), row.clone()], |g, xs| {
            g.sum(g.add(xs[0], xs[1])?)
        });
        check("sub", seed, &[a.clone(), c.clone()], |g, xs| {
            g.sum(g.sub(xs[0], xs[1])?)
        });
        check("mul-broadcast", seed, &[a.clone(), row.clone()], |g, xs| {
            g.sum(g.mul(xs[0], xs[1])?)
        });
        // relu tested away from 0 by at least 1e-2
        let relu_in = {
            let mut t = uniform(vec![n, m], 0.01, 1.0, &mut rng);
            for v in t.data_mut() {
                if rng.random::<f64>() < 0.5 {
                    *v = -*v;
                }
            }
            t
        };
        check("relu", seed, &[relu_in], |g, xs| g.sum(g.relu(xs[0])?));
        check("sigmoid", seed, &[a.clone()], |g, xs| {
            g.sum(g.sigmoid(xs[0])?)
        });
        check("scale", seed, &[a.clone()], |g, xs| {
            g.sum(g.scale(xs[0], 1.7)?)
        });
        check("concat+narrow", seed, &[a.clone(), c.clone()], |g, xs| {
            let cat = g.concat(&[xs[0], xs[1]], 1)?;
            let cut = g.narrow(cat, 1, 1, m)?;
            g.sum(g.mul(cut, cut)?)
        });
        check("transpose+reshape", seed, &[a.clone()], |g, xs| {
            let t = g.transpose(xs[0])?;
            let r = g.reshape(t, vec![n * m])?;
            g.sum(g.mul(r, r)?)
        });
        let mask: Vec<bool> = (0..m).map(|i| i != m - 1 || m == 1).collect();
        check("softmax_masked", seed, &[a.clone()], {
            let mask = mask.clone();
            move |g, xs| {
                let s = g.softmax_masked(xs[0], Some(&mask))?;
                g.sum(g.mul(s, s)?)
            }
        });
        let gain = uniform(vec![m], 0.5, 1.5, &mut rng);
        let bias = uniform(vec![m], -0.5, 0.5, &mut rng);
        check("layer_norm", seed, &[a.clone(), gain, bias], |g, xs| {
            let y = g.layer_norm(xs[0], xs[1], xs[2], 1e-6)?;
            g.sum(g.mul(y, y)?)
        });
        check("dropout", seed, &[a.clone()], move |g, xs| {
            let mut drop_rng = rng_for(seed + 1000);
            let y = g.dropout(xs[0], 0.4, true, &mut drop_rng)?;
            g.sum(y)
        });
        let table = uniform(vec![4, d], -1.0, 1.0, &mut rng);
        check("gather", seed, &[table.clone()], |g, xs| {
            let rows = g.gather(xs[0], &[0, 2, 2, 3])?;
            g.sum(g.mul(rows, rows)?)
        });
        let pool_in = uniform(vec![4, d], -1.0, 1.0, &mut rng);
        check("max_pool_rows", seed, &[pool_in], |g, xs| {
            let pooled = g.max_pool_rows(xs[0], 2, &[true, true, true, false])?;
            g.sum(g.mul(pooled, pooled)?)
        });
        let dw = uniform(vec![3, m], -1.0, 1.0, &mut rng);
        check("depthwise_conv", seed, &[a.clone(), dw], |g, xs| {
            let y = g.depthwise_conv(xs[0], xs[1])?;
            g.sum(g.mul(y, y)?)
        });
        let logits = uniform(vec![m], -2.0, 2.0, &mut rng);
        check("cross_entropy", seed, &[logits], |g, xs| {
            g.cross_entropy(xs[0], None, 0)
        });
        let e = uniform(vec![1], -2.0, 2.0, &mut rng);
        check("binary_logistic", seed, &[e], |g, xs| {
            g.binary_logistic(xs[0], (seed % 2) as u8)
        });

        // composite blocks, driven through the real block code
        composite_blocks(seed);
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "gradient suite took {elapsed:.1}s");
    println!("PASS criterion-1: gradient suite, 20 seeds, {elapsed:.1}s");
}

fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::desk();
    cfg.word_dim = 4;
    cfg.char_dim = 3;
    cfg.model_dim = 8;
    cfg.heads = 2;
    cfg.max_word_len = 4;
    cfg.emb_blocks = 1;
    cfg.emb_conv_layers = 1;
    cfg.model_blocks = 1;
    cfg.model_conv_layers = 1;
    cfg.kernel = 3;
    cfg.ff_hidden = 8;
    cfg.mc_hidden = 8;
    cfg
}

fn tiny_setup(mode: TaskMode, seed: u64) -> (ModelConfig, Vocabulary, Vec<(String, Tensor<f64>)>) {
    let cfg = tiny_config();
    let vocab = Vocabulary::build(["the cat sat on a mat what color"], 1, 100).unwrap();
    let mut rng = rng_for(seed);
    let table = EmbeddingTable::random(vocab.word_count(), cfg.word_dim, &mut rng);
    let params = init_parameters(mode, &cfg, &vocab, table, 3, &mut rng);
    let named: Vec<(String, Tensor<f64>)> = params
        .iter()
        .map(|(n, t)| (n.clone(), t.cast::<f64>()))
        .collect();
    (cfg, vocab, named)
}

fn bind_subset<'g>(
    g: &'g Graph<f64>,
    named: &[(String, Tensor<f64>)],
    ids: &[NodeId],
) -> Bound<'g, f64> {
    Bound::from_named(
        g,
        named
            .iter()
            .zip(ids)
            .map(|((name, _), id)| (name.clone(), *id)),
    )
}

fn composite_blocks(seed: u64) {
    // embedding + highway
    let (cfg, vocab, named) = tiny_setup(TaskMode::Span, seed);
    let text = TokenizedText::from_text("the cat sat", &vocab, cfg.max_word_len).unwrap();
    let embed_names: Vec<(String, Tensor<f64>)> = named
        .iter()
        .filter(|(n, _)| n.starts_with("embed."))
        .cloned()
        .collect();
    let tensors: Vec<Tensor<f64>> = embed_names.iter().map(|(_, t)| t.clone()).collect();
    check("embedding+highway", seed, &tensors, |g, xs| {
        let bound = bind_subset(g, &embed_names, xs);
        let emb = embed_tokens(g, &bound, &text)?;
        let proj = g.add(
            g.matmul(emb, bound.id("embed.proj.w"))?,
            bound.id("embed.proj.b"),
        )?;
        let hw = highway(g, &bound, proj)?;
        g.sum(g.mul(hw, hw)?)
    });

    // encoder block
    let enc_names: Vec<(String, Tensor<f64>)> = named
        .iter()
        .filter(|(n, _)| n.starts_with("emb_enc."))
        .cloned()
        .collect();
    let stack = EncoderStack {
        prefix: "emb_enc",
        blocks: 1,
        conv_layers: 1,
        kernel: 3,
        heads: 2,
        dim: 8,
        ff_hidden: 8,
        dropout: 0.0,
    };
    let mut rng = rng_for(seed + 500);
    let x = uniform(vec![3, 8], -1.0, 1.0, &mut rng);
    let mut enc_inputs: Vec<Tensor<f64>> = vec![x];
    enc_inputs.extend(enc_names.iter().map(|(_, t)| t.clone()));
    check("encoder-block", seed, &enc_inputs, |g, xs| {
        let bound = bind_subset(g, &enc_names, &xs[1..]);
        let mut inner_rng = rng_for(0);
        let y = encoder_forward(g, &bound, &stack, xs[0], &[true; 3], false, &mut inner_rng)?;
        g.sum(g.mul(y, y)?)
    });

    // CQ attention block
    let c = uniform(vec![3, 4], -1.0, 1.0, &mut rng);
    let q = uniform(vec![2, 4], -1.0, 1.0, &mut rng);
    let w0 = uniform(vec![12], -0.5, 0.5, &mut rng);
    check("cq-attention", seed, &[c, q, w0], |g, xs| {
        let s = similarity_matrix(g, xs[0], xs[1], xs[2])?;
        let a = c2q_attention(g, s, xs[1], &[true, true])?;
        let b = q2c_attention(g, s, xs[0], &[true; 3], &[true, true])?;
        let fused = fuse(g, xs[0], a, b)?;
        g.sum(g.mul(fused, fused)?)
    });

    // span head (with loss), classification head, multiple-choice head
    let m0 = uniform(vec![4, 6], -1.0, 1.0, &mut rng);
    let m1 = uniform(vec![4, 6], -1.0, 1.0, &mut rng);
    let m2 = uniform(vec![4, 6], -1.0, 1.0, &mut rng);
    let ws = uniform(vec![12, 1], -0.5, 0.5, &mut rng);
    let we = uniform(vec![12, 1], -0.5, 0.5, &mut rng);
    check(
        "span-head",
        seed,
        &[m0.clone(), m1.clone(), m2.clone(), ws, we],
        |g, xs| {
            let head = span_head(g, xs[0], xs[1], xs[2], &[true; 4], xs[3], xs[4])?;
            span_loss(g, &head, &[true; 4], 1, 2)
        },
    );
    let w = uniform(vec![3, 18], -0.5, 0.5, &mut rng);
    check(
        "classification-head",
        seed,
        &[m0.clone(), m1.clone(), m2.clone(), w],
        |g, xs| {
            let head = classification_head(g, xs[0], xs[1], xs[2], &[true; 4], xs[3])?;
            g.cross_entropy(head.logits, None, 1)
        },
    );
    let mc_names: Vec<(String, Tensor<f64>)> = {
        let (_, _, named_mc) = tiny_setup(TaskMode::MultipleChoice, seed);
        named_mc
            .into_iter()
            .filter(|(n, _)| n.starts_with("mc."))
            .collect()
    };
    let d = 8usize;
    let vs: Vec<Tensor<f64>> = (0..4)
        .map(|_| uniform(vec![1, d], -1.0, 1.0, &mut rng))
        .collect();
    let mut mc_inputs = vs.clone();
    mc_inputs.extend(mc_names.iter().map(|(_, t)| t.clone()));
    check("multichoice-head", seed, &mc_inputs, |g, xs| {
        let bound = bind_subset(g, &mc_names, &xs[4..]);
        let mut inner_rng = rng_for(0);
        let e = multichoice_head(g, &bound, xs[0], xs[1], xs[2], xs[3], false, &mut inner_rng)?;
        g.binary_logistic(e, 1)
    });
}

// ── Criterion 2: normalization invariants ───────────────────────────────

#[test]
fn criterion_2_normalization_invariants() {
    let mut rng = rng_for(2);
    let assert_rows_sum = |t: &Tensor<f64>, cols: usize, what: &str| {
        for row in t.data().chunks(cols) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-5, "{what}: row sums to {sum}");
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)), "{what}");
        }
    };

    // 1000 random masked softmax rows
    let g: Graph<f64> = Graph::new();
    for _ in 0..100 {
        let cols = rng.random_range(2..8usize);
        let x = g.leaf(uniform(vec![10, cols], -30.0, 30.0, &mut rng));
        let mut mask = vec![true; cols];
        if cols > 1 {
            mask[rng.random_range(0..cols)] = false;
        }
        let y = g.softmax_masked(x, Some(&mask)).unwrap();
        assert_rows_sum(&g.value(y), cols, "softmax_masked");
    }

    // S-bar rows and S-double-bar columns over random similarity matrices
    let mut sbar_rows = 0usize;
    let mut sbb_cols = 0usize;
    while sbar_rows < 1000 || sbb_cols < 1000 {
        let n = rng.random_range(2..6usize);
        let m = rng.random_range(2..6usize);
        let c = g.leaf(uniform(vec![n, 4], -1.0, 1.0, &mut rng));
        let q = g.leaf(uniform(vec![m, 4], -1.0, 1.0, &mut rng));
        let w0 = g.leaf(uniform(vec![12], -1.0, 1.0, &mut rng));
        let s = similarity_matrix(&g, c, q, w0).unwrap();
        let sbar = g.softmax_masked(s, Some(&vec![true; m])).unwrap();
        assert_rows_sum(&g.value(sbar), m, "S-bar rows");
        sbar_rows += n;
        let st = g.transpose(s).unwrap();
        let sbb_t = g.softmax_masked(st, Some(&vec![true; n])).unwrap();
        assert_rows_sum(&g.value(sbb_t), n, "S-double-bar columns");
        sbb_cols += m;
    }

    // p_start / p_end and classification distributions
    let mut dists = 0usize;
    while dists < 1000 {
        let n = rng.random_range(2..7usize);
        let d = 4usize;
        let m0 = g.leaf(uniform(vec![n, d], -2.0, 2.0, &mut rng));
        let m1 = g.leaf(uniform(vec![n, d], -2.0, 2.0, &mut rng));
        let m2 = g.leaf(uniform(vec![n, d], -2.0, 2.0, &mut rng));
        let ws = g.leaf(uniform(vec![2 * d, 1], -1.0, 1.0, &mut rng));
        let we = g.leaf(uniform(vec![2 * d, 1], -1.0, 1.0, &mut rng));
        let mask = vec![true; n];
        let head = span_head(&g, m0, m1, m2, &mask, ws, we).unwrap();
        assert_rows_sum(&g.value(head.p_start), n, "p_start");
        assert_rows_sum(&g.value(head.p_end), n, "p_end");
        let k = rng.random_range(2..6usize);
        let w = g.leaf(uniform(vec![k, 3 * d], -1.0, 1.0, &mut rng));
        let class = classification_head(&g, m0, m1, m2, &mask, w).unwrap();
        assert_rows_sum(&g.value(class.probs), k, "classification p");
        dists += 3;
    }

    // sigmoid outputs strictly inside (0, 1)
    for _ in 0..1000 {
        let e = g.leaf(Tensor::scalar(rng.random_range(-30.0..30.0)));
        let p = g.value(g.sigmoid(e).unwrap()).data()[0];
        assert!(p > 0.0 && p < 1.0, "sigmoid out of range: {p}");
    }
    println!("PASS criterion-2: normalization invariants over 1000+ rows per surface");
}

// ── Criterion 3: oracle equivalence ─────────────────────────────────────

#[test]
fn criterion_3_oracle_equivalence() {
    let mut rng = rng_for(3);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-6;

    // matmul vs naive triple loop
    for _ in 0..100 {
        let (n, k, m) = (
            rng.random_range(1..5usize),
            rng.random_range(1..5usize),
            rng.random_range(1..5usize),
        );
        let a = uniform(vec![n, k], -2.0, 2.0, &mut rng);
        let b = uniform(vec![k, m], -2.0, 2.0, &mut rng);
        let g: Graph<f64> = Graph::new();
        let got = g.value(g.matmul(g.leaf(a.clone()), g.leaf(b.clone())).unwrap());
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at2(i, p) * b.at2(p, j);
                }
                assert!(close(got.at2(i, j), s), "matmul mismatch");
            }
        }
    }

    // depthwise separable conv vs sliding window + matrix mix
    for _ in 0..100 {
        let n = rng.random_range(1..7usize);
        let d = rng.random_range(1..5usize);
        let kernel = [1usize, 3, 5][rng.random_range(0..3usize)];
        let x = uniform(vec![n, d], -1.0, 1.0, &mut rng);
        let dw = uniform(vec![kernel, d], -1.0, 1.0, &mut rng);
        let pw = uniform(vec![d, d], -1.0, 1.0, &mut rng);
        let bias = uniform(vec![d], -0.5, 0.5, &mut rng);
        let g: Graph<f64> = Graph::new();
        let ids: Vec<NodeId> = [&x, &dw, &pw, &bias].iter().map(|t| g.leaf((*t).clone())).collect();
        let got = g.value(
            readvqa::model::depthwise_separable_conv(
                &g,
                ids[0],
                &vec![true; n],
                ids[1],
                ids[2],
                ids[3],
            )
            .unwrap(),
        );
        let pad = kernel / 2;
        for t in 0..n {
            for cc in 0..d {
                let mut mixed = bias.data()[cc];
                for kk in 0..d {
                    let mut conv = 0.0;
                    for j in 0..kernel {
                        let s = t as isize + j as isize - pad as isize;
                        if s >= 0 && (s as usize) < n {
                            conv += dw.at2(j, kk) * x.at2(s as usize, kk);
                        }
                    }
                    mixed += conv * pw.at2(kk, cc);
                }
                assert!(close(got.at2(t, cc), mixed.max(0.0)), "dsconv mismatch");
            }
        }
    }

    // multi-head attention vs per-head oracle
    for _ in 0..100 {
        let n = rng.random_range(1..5usize);
        let heads = [1usize, 2][rng.random_range(0..2usize)];
        let d = heads * rng.random_range(1..4usize);
        let x = uniform(vec![n, d], -1.0, 1.0, &mut rng);
        let wq = uniform(vec![d, d], -1.0, 1.0, &mut rng);
        let wk = uniform(vec![d, d], -1.0, 1.0, &mut rng);
        let wv = uniform(vec![d, d], -1.0, 1.0, &mut rng);
        let wo = uniform(vec![d, d], -1.0, 1.0, &mut rng);
        let g: Graph<f64> = Graph::new();
        let ids: Vec<NodeId> = [&x, &wq, &wk, &wv, &wo].iter().map(|t| g.leaf((*t).clone())).collect();
        let got = g.value(
            readvqa::model::multi_head_self_attention(
                &g,
                ids[0],
                &vec![true; n],
                ids[1],
                ids[2],
                ids[3],
                ids[4],
                heads,
            )
            .unwrap(),
        );
        let matmul = |a: &[f64], b: &[f64], n: usize, k: usize, m: usize| {
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    for p in 0..k {
                        out[i * m + j] += a[i * k + p] * b[p * m + j];
                    }
                }
            }
            out
        };
        let dh = d / heads;
        let qm = matmul(x.data(), wq.data(), n, d, d);
        let km = matmul(x.data(), wk.data(), n, d, d);
        let vm = matmul(x.data(), wv.data(), n, d, d);
        let mut merged = vec![0.0; n * d];
        for h in 0..heads {
            for i in 0..n {
                let mut scores = vec![0.0; n];
                for j in 0..n {
                    for p in 0..dh {
                        scores[j] += qm[i * d + h * dh + p] * km[j * d + h * dh + p];
                    }
                    scores[j] /= (dh as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let denom: f64 = ex.iter().sum();
                for p in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += ex[j] / denom * vm[j * d + h * dh + p];
                    }
                    merged[i * d + h * dh + p] = acc;
                }
            }
        }
        let expect = matmul(&merged, wo.data(), n, d, d);
        for (a, b) in got.data().iter().zip(&expect) {
            assert!(close(*a, *b), "mhsa mismatch");
        }
    }

    // c2q / q2c vs brute force
    for _ in 0..100 {
        let n = rng.random_range(1..5usize);
        let m = rng.random_range(1..5usize);
        let d = rng.random_range(1..4usize);
        let s = uniform(vec![n, m], -2.0, 2.0, &mut rng);
        let q = uniform(vec![m, d], -1.0, 1.0, &mut rng);
        let c = uniform(vec![n, d], -1.0, 1.0, &mut rng);
        let g: Graph<f64> = Graph::new();
        let (ns, nq, nc) = (g.leaf(s.clone()), g.leaf(q.clone()), g.leaf(c.clone()));
        let a = g.value(c2q_attention(&g, ns, nq, &vec![true; m]).unwrap());
        let b = g.value(q2c_attention(&g, ns, nc, &vec![true; n], &vec![true; m]).unwrap());
        let softmax = |row: &[f64]| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let denom: f64 = e.iter().sum();
            e.into_iter().map(|v| v / denom).collect::<Vec<f64>>()
        };
        let mut sbar = vec![0.0; n * m];
        for i in 0..n {
            sbar[i * m..(i + 1) * m].copy_from_slice(&softmax(&s.data()[i * m..(i + 1) * m]));
        }
        let mut sbb = vec![0.0; n * m];
        for j in 0..m {
            let col: Vec<f64> = (0..n).map(|i| s.at2(i, j)).collect();
            let sm = softmax(&col);
            for i in 0..n {
                sbb[i * m + j] = sm[i];
            }
        }
        for i in 0..n {
            for kdim in 0..d {
                let mut ea = 0.0;
                for j in 0..m {
                    ea += sbar[i * m + j] * q.at2(j, kdim);
                }
                assert!(close(a.at2(i, kdim), ea), "c2q mismatch");
                let mut eb = 0.0;
                for j in 0..m {
                    for i2 in 0..n {
                        eb += sbar[i * m + j] * sbb[i2 * m + j] * c.at2(i2, kdim);
                    }
                }
                assert!(close(b.at2(i, kdim), eb), "q2c mismatch");
            }
        }
    }

    // decode_span vs exhaustive pair enumeration (exact)
    for _ in 0..200 {
        let n = rng.random_range(1..50usize);
        let max_span = rng.random_range(1..8usize);
        let ps = uniform(vec![n], 0.0, 1.0, &mut rng);
        let pe = uniform(vec![n], 0.0, 1.0, &mut rng);
        let got = decode_span(ps.data(), pe.data(), max_span);
        let mut best = (0usize, 0usize, f64::NEG_INFINITY);
        for i in 0..n {
            for j in i..n.min(i + max_span + 1) {
                let sc = ps.data()[i] * pe.data()[j];
                if sc > best.2 {
                    best = (i, j, sc);
                }
            }
        }
        assert_eq!((got.start, got.end), (best.0, best.1), "decode_span mismatch");
    }

    // retrieve_top_k vs brute-force scoring (exact, ties by id)
    let words = ["water", "dog", "cat", "tree", "sun", "rain", "stone", "milk"];
    for _ in 0..100 {
        let nf = rng.random_range(1..8usize);
        let facts: Vec<Fact> = (0..nf)
            .map(|_| {
                let w = |rng: &mut ChaCha8Rng| words[rng.random_range(0..words.len())];
                Fact {
                    subject: w(&mut rng).to_string(),
                    relation: "related_to".into(),
                    object: w(&mut rng).to_string(),
                    sentence: format!("{} {} {}", w(&mut rng), w(&mut rng), w(&mut rng)),
                }
            })
            .collect();
        let index = FactIndex::build(facts.clone()).unwrap();
        let question = format!(
            "{} {}",
            words[rng.random_range(0..words.len())],
            words[rng.random_range(0..words.len())]
        );
        let concepts = vec![words[rng.random_range(0..words.len())].to_string()];
        let k = rng.random_range(1..5usize);
        let got: Vec<(usize, usize)> = index
            .retrieve_top_k(&question, &concepts, k)
            .iter()
            .map(|h| (h.fact_id, h.score))
            .collect();
        // brute force over the full list
        let qt = content_tokens(&question);
        let mut ct = std::collections::BTreeSet::new();
        for c in &concepts {
            ct.extend(content_tokens(c));
        }
        let mut expect: Vec<(usize, usize)> = facts
            .iter()
            .enumerate()
            .map(|(id, f)| {
                let mut toks = std::collections::BTreeSet::new();
                for field in [&f.subject, &f.relation, &f.object, &f.sentence] {
                    toks.extend(content_tokens(field));
                }
                (
                    id,
                    qt.intersection(&toks).count() + 2 * ct.intersection(&toks).count(),
                )
            })
            .filter(|(_, s)| *s > 0)
            .collect();
        expect.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        expect.truncate(k);
        assert_eq!(got, expect, "retrieval mismatch");
    }
    println!("PASS criterion-3: oracle equivalence on 100+ instances per op");
}

// ── Criteria 4-6: training runs on the bundled fixtures ─────────────────

fn constant_lr(base: f64) -> Schedule {
    Schedule::Decay {
        base_lr: base,
        decay: 1.0,
        interval: 3,
        floor: base,
    }
}

#[test]
fn criterion_4_open_ended_overfit() {
    let start = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        mode: TaskMode::OpenEnded,
        profile: Profile::Desk,
        dataset: Some(fixtures_dir().join("open_ended_train.jsonl")),
        out_dir: out.path().to_path_buf(),
        seed: 11,
        epochs: 300,
        batch_size: 8,
        answer_classes: 20,
        stop_at_perfect_train: true,
        ..RunConfig::default()
    };
    let report = cmd_train(&cfg).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(
        report.final_train_top1, 1.0,
        "train top-1 {} after {} epochs",
        report.final_train_top1, report.epochs_run
    );
    assert!(report.epochs_run <= 300);
    assert!(elapsed < 300.0, "took {elapsed:.1}s");
    println!(
        "PASS criterion-4: open-ended 100% train top-1 at epoch {} in {elapsed:.1}s",
        report.epochs_run
    );
}

#[test]
fn criterion_5_span_copy_task() {
    let start = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        mode: TaskMode::Span,
        profile: Profile::Desk,
        dataset: Some(fixtures_dir().join("span_train.jsonl")),
        out_dir: out.path().to_path_buf(),
        seed: 11,
        epochs: 40,
        context_limit: 64,
        ..RunConfig::default()
    };
    cmd_train(&cfg).unwrap();
    let eval = cmd_eval(
        out.path(),
        &fixtures_dir().join("span_heldout.jsonl"),
        None,
    )
    .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        eval.report.top1 >= 0.90,
        "held-out exact match {}",
        eval.report.top1
    );
    assert!(elapsed < 600.0, "took {elapsed:.1}s");
    println!(
        "PASS criterion-5: span exact match {:.3} on held-out in {elapsed:.1}s",
        eval.report.top1
    );
}

#[test]
fn criterion_6_multiple_choice_ranking() {
    let start = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        mode: TaskMode::MultipleChoice,
        profile: Profile::Desk,
        dataset: Some(fixtures_dir().join("mc_train.jsonl")),
        val_dataset: Some(fixtures_dir().join("mc_val.jsonl")),
        out_dir: out.path().to_path_buf(),
        seed: 11,
        epochs: 120,
        batch_size: 8,
        context_limit: 64,
        schedule: constant_lr(0.001),
        ..RunConfig::default()
    };
    cmd_train(&cfg).unwrap();
    let eval = cmd_eval(out.path(), &fixtures_dir().join("mc_heldout.jsonl"), None).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        eval.report.top1 >= 0.90,
        "held-out correct-choice accuracy {}",
        eval.report.top1
    );
    assert!(elapsed < 600.0, "took {elapsed:.1}s");

    // the trained model should saturate an easy held-out instance
    let examples =
        readvqa::text::load_examples(&fixtures_dir().join("mc_heldout.jsonl")).unwrap();
    let ex = &examples[0];
    let predict = readvqa::cli::cmd_predict(
        out.path(),
        &ex.description_sentences,
        &ex.question,
        ex.choices.as_ref().unwrap(),
        None,
        &[],
        3,
    )
    .unwrap();
    let gold_prob = predict.answers[ex.correct_index.unwrap()].probability;
    assert!(gold_prob > 0.9, "gold choice probability {gold_prob}");

    println!(
        "PASS criterion-6: multiple-choice held-out accuracy {:.3}, gold prob {gold_prob:.2} in {elapsed:.1}s",
        eval.report.top1
    );
}

// ── Criterion 7: schedule conformance ────────────────────────────────────

#[test]
fn criterion_7_schedule_conformance() {
    let s = Schedule::scratch_default();
    // exact geometric sequence until the floor engages
    for k in 0..=10usize {
        let expect = 0.001 * 0.8f64.powi(k as i32);
        let clamped = expect.max(0.0001);
        for e in (3 * k)..(3 * k + 3) {
            assert_eq!(s.lr_at(e), clamped, "epoch {e}");
        }
    }
    assert_eq!(s.lr_at(0), 0.001);
    assert!((s.lr_at(3) - 0.0008).abs() < 1e-15);
    assert!((s.lr_at(6) - 0.00064).abs() < 1e-15);
    // 0.8^11 drops below the floor: clamp exactly to 0.0001 from epoch 33 on
    assert_eq!(s.lr_at(33), 0.0001);
    assert_eq!(s.lr_at(1000), 0.0001);
    // finetune profile: 0.001 x10 epochs then 0.0001
    let f = Schedule::finetune_default();
    for e in 0..10 {
        assert_eq!(f.lr_at(e), 0.001);
    }
    for e in 10..20 {
        assert_eq!(f.lr_at(e), 0.0001);
    }
    println!("PASS criterion-7: schedule reproduces 0.001/0.0008/0.00064/../0.0001 floor and finetune profile");
}

// ── Criterion 8: determinism ─────────────────────────────────────────────

#[test]
fn criterion_8_determinism() {
    let run = |dir: &Path| {
        let cfg = RunConfig {
            mode: TaskMode::OpenEnded,
            profile: Profile::Desk,
            dataset: Some(fixtures_dir().join("open_ended_train.jsonl")),
            out_dir: dir.to_path_buf(),
            seed: 23,
            epochs: 5,
            batch_size: 8,
            answer_classes: 20,
            ..RunConfig::default()
        };
        cmd_train(&cfg).unwrap();
        (
            std::fs::read(dir.join("trace.csv")).unwrap(),
            std::fs::read(dir.join("checkpoint.ckpt")).unwrap(),
        )
    };
    // same out_dir both times: the config echo in the checkpoint includes it
    let dir = tempfile::tempdir().unwrap();
    let (trace1, ckpt1) = run(dir.path());
    let (trace2, ckpt2) = run(dir.path());
    assert_eq!(trace1, trace2, "loss traces differ between same-seed runs");
    assert_eq!(ckpt1, ckpt2, "checkpoints differ between same-seed runs");
    println!(
        "PASS criterion-8: byte-identical trace ({} bytes) and checkpoint ({} bytes)",
        trace1.len(),
        ckpt1.len()
    );
}

// ── Criterion 9: evaluation protocol conformance ─────────────────────────

struct Scripted {
    ranked: BTreeMap<String, Vec<&'static str>>,
}

impl Predictor for Scripted {
    fn predict_open(&self, ex: &QAExample) -> readvqa::Result<Vec<(String, f64)>> {
        Ok(self.ranked[&ex.id]
            .iter()
            .enumerate()
            .map(|(i, l)| (l.to_string(), 1.0 / (i + 1) as f64))
            .collect())
    }
    fn predict_choice_probs(&self, _ex: &QAExample) -> readvqa::Result<Vec<f64>> {
        unreachable!()
    }
    fn predict_span_text(&self, _ex: &QAExample) -> readvqa::Result<String> {
        unreachable!()
    }
}

#[test]
fn criterion_9_protocol_conformance() {
    // 12 examples, two per 6W type; scripted rankings with hand-computed
    // top-1 = 6/12 and top-3 = 9/12
    let mk = |id: &str, qtype: QType| QAExample {
        id: id.into(),
        description_sentences: vec!["scene".into()],
        facts: vec![],
        question: "q".into(),
        answers: vec!["gold".into()],
        qtype,
        choices: None,
        correct_index: None,
        visual_concepts: vec![],
    };
    let dataset = vec![
        mk("what1", QType::What),
        mk("what2", QType::What),
        mk("where1", QType::Where),
        mk("where2", QType::Where),
        mk("when1", QType::When),
        mk("when2", QType::When),
        mk("who1", QType::Who),
        mk("who2", QType::Who),
        mk("why1", QType::Why),
        mk("why2", QType::Why),
        mk("how1", QType::How),
        mk("how2", QType::How),
    ];
    let mut ranked = BTreeMap::new();
    // what: both top-1
    ranked.insert("what1".into(), vec!["gold", "x", "y"]);
    ranked.insert("what2".into(), vec!["gold", "x", "y"]);
    // where: one top-1, one rank-2
    ranked.insert("where1".into(), vec!["gold", "x", "y"]);
    ranked.insert("where2".into(), vec!["x", "gold", "y"]);
    // when: both rank-3
    ranked.insert("when1".into(), vec!["x", "y", "gold"]);
    ranked.insert("when2".into(), vec!["x", "y", "gold"]);
    // who: one top-1, one complete miss
    ranked.insert("who1".into(), vec!["gold", "x", "y"]);
    ranked.insert("who2".into(), vec!["x", "y", "z"]);
    // why: both miss
    ranked.insert("why1".into(), vec!["x", "y", "z"]);
    ranked.insert("why2".into(), vec!["x", "y", "z"]);
    // how: both top-1
    ranked.insert("how1".into(), vec!["gold", "x", "y"]);
    ranked.insert("how2".into(), vec!["gold", "x", "y"]);

    let report = evaluate(&Scripted { ranked }, &dataset, TaskMode::OpenEnded).unwrap();
    assert_eq!(report.num_examples, 12);
    assert_eq!(report.top1, 6.0 / 12.0);
    assert_eq!(report.top3, 9.0 / 12.0);
    let expect: BTreeMap<&str, (f64, usize)> = [
        ("what", (1.0, 2)),
        ("where", (0.5, 2)),
        ("when", (0.0, 2)),
        ("who", (0.5, 2)),
        ("why", (0.0, 2)),
        ("how", (1.0, 2)),
    ]
    .into_iter()
    .collect();
    assert_eq!(report.per_qtype.len(), expect.len());
    for (qtype, stats) in &report.per_qtype {
        let (top1, count) = expect[qtype.as_str()];
        assert_eq!(stats.top1, top1, "{qtype}");
        assert_eq!(stats.count, count, "{qtype}");
    }

    // normalize_answer idempotence over 10,000 random strings
    let mut rng = rng_for(9);
    let alphabet: Vec<char> = "abcdefghijklmnopqrstuvwxyzABCZ .,'!?-()s0189\u{e9}\u{4e2d}".chars().collect();
    for _ in 0..10_000 {
        let len = rng.random_range(0..24usize);
        let s: String = (0..len)
            .map(|_| alphabet[rng.random_range(0..alphabet.len())])
            .collect();
        let once = normalize_answer(&s);
        assert_eq!(normalize_answer(&once), once, "not idempotent on {s:?}");
    }
    println!("PASS criterion-9: hand-computed eval tables match; normalization idempotent on 10k strings");
}

// ── Criterion 10: retrieval recall on the bundled fixture ───────────────

#[test]
fn criterion_10_retrieval_recall() {
    let facts = readvqa::retrieval::load_facts(&fixtures_dir().join("facts.jsonl")).unwrap();
    assert_eq!(facts.len(), 20);
    let queries: Vec<readvqa::fixtures::RetrievalQuery> = serde_json::from_str(
        &std::fs::read_to_string(fixtures_dir().join("retrieval_queries.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(queries.len(), 10);
    let index = FactIndex::build(facts.clone()).unwrap();
    let mut hits = 0usize;
    for q in &queries {
        let top = index.retrieve_top_k(&q.question, &q.concepts, 3);
        // brute-force verification of the ranking
        let qt = content_tokens(&q.question);
        let mut ct = std::collections::BTreeSet::new();
        for c in &q.concepts {
            ct.extend(content_tokens(c));
        }
        let mut expect: Vec<(usize, usize)> = facts
            .iter()
            .enumerate()
            .map(|(id, f)| {
                let mut toks = std::collections::BTreeSet::new();
                for field in [&f.subject, &f.relation, &f.object, &f.sentence] {
                    toks.extend(content_tokens(field));
                }
                (
                    id,
                    qt.intersection(&toks).count() + 2 * ct.intersection(&toks).count(),
                )
            })
            .filter(|(_, s)| *s > 0)
            .collect();
        expect.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        expect.truncate(3);
        assert_eq!(
            top.iter().map(|h| (h.fact_id, h.score)).collect::<Vec<_>>(),
            expect,
            "{}: index disagrees with brute force",
            q.question
        );
        if top.iter().any(|h| h.fact_id == q.gold_fact_index) {
            hits += 1;
        }
    }
    assert_eq!(hits, 10, "gold fact in top-3 for only {hits}/10 queries");
    println!("PASS criterion-10: gold fact in top-3 for 10/10 queries, brute-force verified");
}
