//! The end-to-end gradient-check suite: every differentiable op, every
//! layer and every model variant at tiny sizes, each compared against
//! central finite differences.
//!
//! Elementwise ops must agree within 1e-6; layers and full models within
//! 1e-4 (finite-difference roundoff grows with depth, so deeper components
//! use a coarser step).

use crate::layers::{
    bilstm_forward, encoder_block, linear, lstm_cell_step, multi_head_self_attention,
    temporal_attention, BiLstmParams, EncoderBlockParams, LinearParams, LstmCellParams,
    TemporalAttentionParams,
};
use crate::models::{Model, ModelConfig, Variant};
use crate::tensor::{grad_check_multi, NodeId, Tape, Tensor, TensorError};
use crate::training::bce_per_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::Cell;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct ComponentCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub checks: Vec<ComponentCheck>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(ComponentCheck::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ComponentCheck> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.checks.iter().any(|c| c.name == name)
    }
}

/// Runs the whole suite with the given seed.
pub fn run_suite(seed: u64) -> SuiteReport {
    run_suite_with_corruption(seed, None)
}

/// Like [`run_suite`], but the named component's finite-difference
/// evaluations see a slightly rescaled loss, imitating a forward/backward
/// inconsistency. A negative control: the suite must flag exactly that
/// component.
pub fn run_suite_with_corruption(seed: u64, corrupt: Option<&str>) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::default();
    let mut run = |name: &'static str,
                   tolerance: f64,
                   h: f64,
                   inputs: &[Tensor],
                   build: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>| {
        let started = Instant::now();
        let corrupted = corrupt == Some(name);
        let first_call = Cell::new(true);
        let max_rel_error = grad_check_multi(
            |tape, ids| {
                let loss = build(tape, ids)?;
                if corrupted && !first_call.replace(false) {
                    return Ok(tape.scale(loss, 1.0 + 1e-3));
                }
                first_call.set(false);
                Ok(loss)
            },
            inputs,
            h,
        )
        .expect("suite graphs are well-formed");
        report.checks.push(ComponentCheck {
            name,
            max_rel_error,
            tolerance,
            seconds: started.elapsed().as_secs_f64(),
        });
    };

    let rand_tensor = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::new(shape.to_vec(), data).expect("random tensor")
    };
    // Kink-free samples for relu/clamp: keep every coordinate away from the
    // non-differentiable points by more than the FD step.
    let rand_tensor_away_from = |rng: &mut ChaCha8Rng, shape: &[usize], margin: f64| {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                sign * rng.gen_range(margin..1.5)
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("random tensor")
    };
    let weighted_sum = |tape: &mut Tape, out: NodeId, w: &Tensor| -> Result<NodeId, TensorError> {
        let wid = tape.leaf(w.clone(), false);
        let prod = tape.mul(out, wid)?;
        Ok(tape.sum(prod))
    };

    const H_OPS: f64 = 1e-5;
    const H_DEEP: f64 = 1e-4;

    // ── tensor ops ──────────────────────────────────────────────────
    {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        run("op.matmul", 1e-6, H_OPS, &[a, b], &|tape, ids| {
            let out = tape.matmul(ids[0], ids[1])?;
            Ok(tape.sum(out))
        });
    }
    {
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        run("op.matmul_batched", 1e-6, H_OPS, &[a, b], &|tape, ids| {
            let out = tape.matmul(ids[0], ids[1])?;
            Ok(tape.sum(out))
        });
    }
    {
        let a = rand_tensor(&mut rng, &[4, 3]);
        let bias = rand_tensor(&mut rng, &[3]);
        let w = rand_tensor(&mut rng, &[4, 3]);
        run("op.add", 1e-6, H_OPS, &[a, bias], &move |tape, ids| {
            let out = tape.add(ids[0], ids[1])?;
            weighted_sum(tape, out, &w)
        });
    }
    {
        let a = rand_tensor(&mut rng, &[4, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        run("op.mul", 1e-6, H_OPS, &[a, b], &|tape, ids| {
            let out = tape.mul(ids[0], ids[1])?;
            Ok(tape.sum(out))
        });
    }
    {
        let x = rand_tensor(&mut rng, &[5]);
        run("op.scale", 1e-6, H_OPS, &[x], &|tape, ids| {
            let out = tape.affine(ids[0], -0.7, 0.3);
            Ok(tape.sum(out))
        });
    }
    {
        let x = rand_tensor(&mut rng, &[6]);
        let w = rand_tensor(&mut rng, &[6]);
        run("op.sigmoid", 1e-6, H_OPS, &[x], &move |tape, ids| {
            let out = tape.sigmoid(ids[0]);
            weighted_sum(tape, out, &w)
        });
    }
    {
        let x = rand_tensor(&mut rng, &[6]);
        let w = rand_tensor(&mut rng, &[6]);
        run("op.tanh", 1e-6, H_OPS, &[x], &move |tape, ids| {
            let out = tape.tanh(ids[0]);
            weighted_sum(tape, out, &w)
        });
    }
    {
        let x = rand_tensor_away_from(&mut rng, &[6], 0.05);
        let w = rand_tensor(&mut rng, &[6]);
        run("op.relu", 1e-6, H_OPS, &[x], &move |tape, ids| {
            let out = tape.relu(ids[0]);
            weighted_sum(tape, out, &w)
        });
    }
    {
        let x = rand_tensor(&mut rng, &[3, 5]);
        let w = rand_tensor(&mut rng, &[3, 5]);
        run("op.softmax_last", 1e-6, H_OPS, &[x], &move |tape, ids| {
            let out = tape.softmax_last(ids[0]);
            weighted_sum(tape, out, &w)
        });
    }
    {
        let x = rand_tensor(&mut rng, &[2, 4]);
        let gamma = rand_tensor(&mut rng, &[4]);
        let beta = rand_tensor(&mut rng, &[4]);
        let w = rand_tensor(&mut rng, &[2, 4]);
        run(
            "op.layer_norm",
            1e-5,
            H_OPS,
            &[x, gamma, beta],
            &move |tape, ids| {
                let out = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                weighted_sum(tape, out, &w)
            },
        );
    }
    {
        let a = rand_tensor(&mut rng, &[3, 2]);
        let b = rand_tensor(&mut rng, &[3, 3]);
        let w = rand_tensor(&mut rng, &[3, 5]);
        run("op.concat_last", 1e-6, H_OPS, &[a, b], &move |tape, ids| {
            let out = tape.concat_last(&[ids[0], ids[1]])?;
            weighted_sum(tape, out, &w)
        });
    }
    {
        // Positive inputs comfortably inside the clamp band.
        let n = 6;
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..2.0)).collect();
        let x = Tensor::new(vec![n], data).expect("log input");
        run("op.log_clamp", 1e-6, H_OPS, &[x], &|tape, ids| {
            let c = tape.clamp(ids[0], 0.05, 5.0);
            let l = tape.log(c);
            Ok(tape.sum(l))
        });
    }
    {
        let x = rand_tensor(&mut rng, &[4, 3]);
        let y = rand_tensor(&mut rng, &[1, 3]);
        let w = rand_tensor(&mut rng, &[4, 6]);
        run(
            "op.slice_stack_transpose",
            1e-6,
            H_OPS,
            &[x, y],
            &move |tape, ids| {
                let top = tape.slice_rows(ids[0], 0, 2)?;
                let bottom = tape.slice_rows(ids[0], 2, 2)?;
                let rep = tape.repeat_rows(ids[1], 2)?;
                let rows = tape.concat_rows(&[top, rep])?;
                let tr = tape.transpose(bottom)?;
                let trt = tape.transpose(tr)?;
                let rows2 = tape.concat_rows(&[trt, bottom])?;
                let wide = tape.concat_last(&[rows, rows2])?;
                weighted_sum(tape, wide, &w)
            },
        );
    }

    // ── layers ──────────────────────────────────────────────────────
    {
        let p = LinearParams::init(&mut rng, 3, 2);
        let x = rand_tensor(&mut rng, &[4, 3]);
        let inputs = vec![x, p.weight.clone(), p.bias.clone()];
        run("layer.linear", 1e-6, H_OPS, &inputs, &|tape, ids| {
            let p = LinearParams {
                weight: ids[1],
                bias: ids[2],
            };
            let out = linear(tape, ids[0], &p)?;
            Ok(tape.sum(out))
        });
    }
    {
        let (steps, f_dim, hidden) = (3usize, 3usize, 2usize);
        let p = LstmCellParams::init(&mut rng, f_dim, hidden);
        let x = rand_tensor(&mut rng, &[steps, f_dim]);
        let mut inputs = vec![x];
        p.visit("p", &mut |_, t| inputs.push(t.clone()));
        run("layer.lstm_cell", 1e-5, H_OPS, &inputs, &move |tape, ids| {
            let mut it = ids[1..].iter().copied();
            let p = LstmCellParams::build(&mut || it.next().expect("lstm ids"));
            let mut h = tape.leaf(Tensor::zeros(vec![1, hidden]), false);
            let mut c = tape.leaf(Tensor::zeros(vec![1, hidden]), false);
            let mut total: Option<NodeId> = None;
            for t in 0..steps {
                let x_t = tape.slice_rows(ids[0], t, 1)?;
                let (h_t, c_t) = lstm_cell_step(tape, x_t, h, c, &p)?;
                h = h_t;
                c = c_t;
                let s = tape.sum(h_t);
                total = Some(match total {
                    None => s,
                    Some(acc) => tape.add(acc, s)?,
                });
            }
            Ok(total.expect("at least one step"))
        });
    }
    {
        let (t_len, f_dim, hidden) = (4usize, 3usize, 2usize);
        let p = BiLstmParams::init(&mut rng, f_dim, hidden);
        let x = rand_tensor(&mut rng, &[t_len, f_dim]);
        let w = rand_tensor(&mut rng, &[t_len, 2 * hidden]);
        let mut inputs = vec![x];
        p.visit("p", &mut |_, t| inputs.push(t.clone()));
        run("layer.bilstm", 1e-4, H_OPS, &inputs, &move |tape, ids| {
            let mut it = ids[1..].iter().copied();
            let p = BiLstmParams::build(&mut || it.next().expect("bilstm ids"));
            let out = bilstm_forward(tape, ids[0], hidden, &p)?;
            weighted_sum(tape, out, &w)
        });
    }
    {
        let p = EncoderBlockParams::init(&mut rng, 4, 2, 2, 8);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let mut inputs = vec![x];
        p.visit("p", &mut |_, t| inputs.push(t.clone()));
        let heads = p.heads.len();
        run("layer.attention", 1e-5, H_OPS, &inputs, &move |tape, ids| {
            let mut it = ids[1..].iter().copied();
            let p = EncoderBlockParams::build(heads, &mut || it.next().expect("attention ids"));
            let out = multi_head_self_attention(tape, ids[0], &p)?;
            weighted_sum(tape, out, &w)
        });
    }
    {
        let p = EncoderBlockParams::init(&mut rng, 4, 2, 2, 8);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let mut inputs = vec![x];
        p.visit("p", &mut |_, t| inputs.push(t.clone()));
        let heads = p.heads.len();
        run(
            "layer.encoder_block",
            1e-4,
            H_OPS,
            &inputs,
            &move |tape, ids| {
                let mut it = ids[1..].iter().copied();
                let p = EncoderBlockParams::build(heads, &mut || it.next().expect("encoder ids"));
                let out = encoder_block(tape, ids[0], &p)?;
                weighted_sum(tape, out, &w)
            },
        );
    }
    {
        let p = TemporalAttentionParams::init(&mut rng, 3);
        let h = rand_tensor(&mut rng, &[4, 3]);
        let w = rand_tensor(&mut rng, &[4, 6]);
        let mut inputs = vec![h];
        p.visit("p", &mut |_, t| inputs.push(t.clone()));
        run(
            "layer.temporal_attention",
            1e-5,
            H_OPS,
            &inputs,
            &move |tape, ids| {
                let mut it = ids[1..].iter().copied();
                let p = TemporalAttentionParams::build(&mut || it.next().expect("attention ids"));
                let out = temporal_attention(tape, ids[0], &p)?;
                weighted_sum(tape, out, &w)
            },
        );
    }

    // ── full models: BCE loss through every variant ─────────────────
    for variant in Variant::ALL {
        let name = match variant {
            Variant::HybridConcat => "model.hybrid_concat",
            Variant::BilstmThenTransformer => "model.bilstm_then_transformer",
            Variant::TransformerThenBilstm => "model.transformer_then_bilstm",
            Variant::BilstmAttention => "model.bilstm_attention",
        };
        let config = ModelConfig {
            variant,
            input_features: 3,
            seq_len: 4,
            lstm_hidden: 3,
            trans_width: 4,
            heads: 2,
            head_dim: 2,
            ffn_width: 8,
            encoder_blocks: 1,
            seed: rng.gen(),
            dropout: None,
        };
        let model = Model::build(&config).expect("tiny config is valid");
        let x = rand_tensor(&mut rng, &[config.seq_len, config.input_features]);
        let labels: Vec<u8> = (0..config.seq_len)
            .map(|_| u8::from(rng.gen_bool(0.5)))
            .collect();
        let inputs: Vec<Tensor> = model.params().map(|(_, t)| t.clone()).collect();
        run(name, 1e-4, H_DEEP, &inputs, &move |tape, ids| {
            let wired = model.wire(ids);
            let x_id = tape.leaf(x.clone(), false);
            let probs = model.forward_on_tape(tape, x_id, &wired, None)?;
            match bce_per_sample(tape, probs, &labels) {
                Ok(loss) => Ok(loss),
                Err(crate::training::TrainError::Tensor(e)) => Err(e),
                Err(other) => panic!("unexpected loss error: {other}"),
            }
        });
    }

    report
}
