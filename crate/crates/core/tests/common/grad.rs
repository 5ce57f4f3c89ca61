//! Finite-difference cases for every differentiable tape op and a toy model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stk_core::adapter::{balance_term, Ablation, AdapterConfig, AssignmentCounts, BalanceReduction};
use stk_core::encoder::GraphState;
use stk_core::model::{compute_loss, example_forward, target_pairs, BackboneConfig, Example, StkModel};
use stk_core::numerics::{
    grad_check, linear, mean, scaled_dot_attention, softmax, GradCheck, Mask, ParamStore, Tape, Tensor, Var,
};
use stk_core::rules::instruction::{ANSWER_LEN, BOS, CLOSE, DOT, QUERY};
use stk_core::rules::InstructionSequence;
use stk_core::Result;

pub const EPS: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

/// How to fill a parameter before checking.
#[derive(Clone, Copy)]
pub enum Fill {
    Signed,
    /// Bounded away from zero, for kinks such as ReLU.
    AwayFromZero,
    Positive,
}

type Body = fn(&mut Tape, &[Var]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Fill)>,
    pub body: Body,
}

fn case(name: &'static str, inputs: &[(&[usize], Fill)], body: Body) -> OpCase {
    OpCase {
        name,
        inputs: inputs.iter().map(|(s, f)| (s.to_vec(), *f)).collect(),
        body,
    }
}

use Fill::*;

pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[(&[3, 4], Signed), (&[4, 2], Signed)], |t, v| t.matmul(v[0], v[1])),
        case("matmul_nt", &[(&[3, 4], Signed), (&[5, 4], Signed)], |t, v| t.matmul_nt(v[0], v[1])),
        case("add", &[(&[2, 3], Signed), (&[2, 3], Signed)], |t, v| t.add(v[0], v[1])),
        case("sub", &[(&[2, 3], Signed), (&[2, 3], Signed)], |t, v| t.sub(v[0], v[1])),
        case("mul", &[(&[2, 3], Signed), (&[2, 3], Signed)], |t, v| t.mul(v[0], v[1])),
        case("add_row", &[(&[3, 4], Signed), (&[1, 4], Signed)], |t, v| t.add_row(v[0], v[1])),
        case("scale", &[(&[2, 3], Signed)], |t, v| Ok(t.scale(v[0], -1.7))),
        case("scale_rows", &[(&[3, 2], Signed), (&[3, 1], Signed)], |t, v| t.scale_rows(v[0], v[1])),
        case("relu", &[(&[3, 3], AwayFromZero)], |t, v| Ok(t.relu(v[0]))),
        case("sigmoid", &[(&[3, 3], Signed)], |t, v| Ok(t.sigmoid(v[0]))),
        case("tanh", &[(&[3, 3], Signed)], |t, v| Ok(t.tanh(v[0]))),
        case("one_minus", &[(&[2, 3], Signed)], |t, v| Ok(t.one_minus(v[0]))),
        case("softmax_rows", &[(&[3, 4], Signed)], |t, v| t.softmax_rows(v[0], None)),
        case("softmax_rows_causal", &[(&[3, 5], Signed)], |t, v| {
            t.softmax_rows(v[0], Some(&Mask::Causal { offset: 2 }))
        }),
        case("log_softmax_rows", &[(&[3, 4], Signed)], |t, v| Ok(t.log_softmax_rows(v[0]))),
        case(
            "layer_norm",
            &[(&[3, 5], Signed), (&[1, 5], Signed), (&[1, 5], Signed)],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        case("gather_rows", &[(&[4, 3], Signed)], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3])),
        case("scatter_rows", &[(&[4, 3], Signed), (&[2, 3], Signed)], |t, v| {
            t.scatter_rows(v[0], &[3, 1], v[1])
        }),
        case("concat_cols", &[(&[2, 3], Signed), (&[2, 2], Signed)], |t, v| t.concat_cols(&[v[0], v[1]])),
        case("concat_rows", &[(&[2, 3], Signed), (&[1, 3], Signed)], |t, v| t.concat_rows(&[v[0], v[1]])),
        case("slice_cols", &[(&[3, 5], Signed)], |t, v| t.slice_cols(v[0], 1, 4)),
        case("normalize_rows", &[(&[3, 4], Positive)], |t, v| t.normalize_rows(v[0])),
        case("sum_rows", &[(&[3, 4], Signed)], |t, v| Ok(t.sum_rows(v[0]))),
        case("sum", &[(&[3, 4], Signed)], |t, v| Ok(t.sum(v[0]))),
        case("cross_entropy", &[(&[3, 5], Signed)], |t, v| t.cross_entropy(v[0], &[(0, 1), (2, 4), (1, 1)])),
        case("linear", &[(&[3, 4], Signed), (&[4, 2], Signed), (&[1, 2], Signed)], |t, v| {
            linear(t, v[0], v[1], Some(v[2]))
        }),
        case("softmax", &[(&[2, 4], Signed)], |t, v| softmax(t, v[0])),
        case(
            "scaled_dot_attention",
            &[(&[3, 4], Signed), (&[5, 4], Signed), (&[5, 2], Signed)],
            |t, v| scaled_dot_attention(t, v[0], v[1], v[2], Some(&Mask::Causal { offset: 2 })),
        ),
        case("mean", &[(&[3, 4], Signed)], |t, v| Ok(mean(t, v[0]))),
    ]
}

fn fill(rng: &mut ChaCha8Rng, shape: &[usize], f: Fill) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let x: f64 = rng.gen_range(-1.0..1.0);
            match f {
                Signed => x,
                AwayFromZero => x.signum() * (0.2 + x.abs()),
                Positive => 0.5 + x.abs(),
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Checks one op, reduced to a scalar through a fixed random projection.
pub fn check_op(c: &OpCase, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<_> = c
        .inputs
        .iter()
        .enumerate()
        .map(|(i, (shape, f))| store.add(format!("x{i}"), fill(&mut rng, shape, *f), true).unwrap())
        .collect();
    let mut probe = {
        let mut t = Tape::inference();
        let vars: Vec<Var> = ids.iter().map(|&id| t.param(&store, id)).collect();
        let out = (c.body)(&mut t, &vars)?;
        t.value(out).shape().to_vec()
    };
    if probe.len() == 1 {
        probe = vec![1, probe[0]];
    }
    let proj = fill(&mut rng, &probe, Signed);
    let body = c.body;
    let vars_of = ids.clone();
    grad_check(&mut store, &ids, EPS, TOLERANCE, move |t, s| {
        let vars: Vec<Var> = vars_of.iter().map(|&id| t.param(s, id)).collect();
        let out = body(t, &vars)?;
        let p = t.constant(proj.clone().reshaped(t.value(out).shape())?);
        let prod = t.mul(out, p)?;
        Ok(t.sum(prod))
    })
}

/// Central differences at `EPS` and `EPS / 2` agree for every entry, so no
/// ReLU kink or routing flip lies inside the stencil.
fn smooth_at<F>(store: &mut ParamStore, ids: &[stk_core::numerics::ParamId], f: F) -> Result<bool>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::inference();
        let v = f(&mut t, s)?;
        Ok(t.value(v).data()[0])
    };
    for &id in ids {
        for j in 0..store.value(id).len() {
            let orig = store.value(id).data()[j];
            let mut diff = |h: f64| -> Result<f64> {
                store.value_mut(id).data_mut()[j] = orig + h;
                let plus = eval(store)?;
                store.value_mut(id).data_mut()[j] = orig - h;
                let minus = eval(store)?;
                store.value_mut(id).data_mut()[j] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let (a, b) = (diff(EPS)?, diff(EPS / 2.0)?);
            if (a - b).abs() > 1e-3 * a.abs().max(b.abs()).max(1e-6) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

pub struct ToyCheck {
    pub result: GradCheck,
    /// Instances redrawn because the loss was not smooth at the stencil.
    pub redraws: usize,
}

/// The 2-layer toy model (d_t 8, d_g 4, two experts, top-1) on one random
/// instruction; checks the full loss including the balance term.
pub fn check_toy_model(seed: u64) -> Result<ToyCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for redraws in 0.. {
        let (model, ex) = toy_instance(&mut rng, seed)?;
        let ids: Vec<_> = model.store().ids().collect();
        let loss = |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
            let mut m = model.clone();
            *m.store_mut() = s.clone();
            let mut records = Vec::new();
            let logits = example_forward(&m, tape, &ex, &Ablation::default(), &mut records)?;
            let mut counts = AssignmentCounts::default();
            counts.absorb(&records);
            let bal = balance_term(tape, &records, &counts, BalanceReduction::Sum)?;
            compute_loss(tape, logits, &target_pairs(&ex.instruction)?, bal, 0.1)
        };
        let mut store = model.store().clone();
        if !smooth_at(&mut store, &ids, loss)? {
            continue;
        }
        let result = grad_check(&mut store, &ids, EPS, TOLERANCE, loss)?;
        return Ok(ToyCheck { result, redraws });
    }
    unreachable!()
}

fn toy_instance(rng: &mut ChaCha8Rng, seed: u64) -> Result<(StkModel, Example)> {
    let vocab = 24;
    let backbone = BackboneConfig {
        vocab_size: vocab,
        d_t: 8,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 16,
        max_seq_len: 32,
        seed,
    };
    let adapter = AdapterConfig {
        n_experts: 2,
        top_k: 1,
        d_k: 4,
        init_seed: seed,
    };
    let d_g = 4;
    let mut model = StkModel::new(backbone, adapter, 2 * d_g)?;
    let ids: Vec<_> = model.store().ids().collect();
    for &id in &ids {
        let shape = model.store().value(id).shape().to_vec();
        let t = fill(rng, &shape, Signed);
        let t = Tensor::new(shape, t.data().iter().map(|x| 0.5 * x).collect())?;
        model.store_mut().set_value(id, t)?;
        model.store_mut().set_trainable(id, true);
    }
    // BOS, one event span, QUERY, a query span, then the answer.
    let mut tokens = vec![BOS];
    tokens.extend((0..11).map(|_| rng.gen_range(8..vocab as u32)));
    tokens.push(QUERY);
    tokens.extend((0..7).map(|_| rng.gen_range(8..vocab as u32)));
    let mut time_map = vec![0];
    time_map.extend(std::iter::repeat_n(1, 11));
    time_map.push(12);
    time_map.extend(std::iter::repeat_n(13, 7));
    let instruction = InstructionSequence {
        query: stk_core::data::Query {
            subject: 0,
            relation: 0,
            time: 1,
        },
        tokens,
        time_map,
        event_spans: vec![(1, 12), (13, 20)],
        candidate_index: vec![0],
        gold: Some(0),
        target: Some(vec![rng.gen_range(8..vocab as u32), DOT, rng.gen_range(8..vocab as u32), CLOSE]),
    };
    debug_assert_eq!(instruction.target.as_ref().unwrap().len(), ANSWER_LEN);
    let h0 = fill(rng, &[1, 2 * d_g], Signed);
    let ex = Example {
        instruction,
        graph: GraphState {
            h0: h0.clone(),
            h_current: h0,
        },
    };
    Ok((model, ex))
}
