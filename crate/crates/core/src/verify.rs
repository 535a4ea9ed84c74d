//! Numerical self-checks: factored-vs-quadratic attention equivalence and
//! finite-difference gradient suites.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, reference, AttentionParams, GateVariant, DEFAULT_EPS};
use crate::autodiff::{finite_diff_check, NodeId, Tape, FD_STEP};
use crate::blocks::{
    Conv3Post, Cpe, Downsample, DwConvBlock, Elrf, Ffn, Init, Mib, PostAttention, PostAttnKind,
    RgmaBlock, Stem,
};
use crate::distill::{multi_teacher_loss_in, ProjectionHeads, TeacherFeatures};
use crate::error::{config_err, Error, Result};
use crate::graph::Eager;
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Tensor};

/// Tolerance for factored-vs-naive attention.
pub const EQUIV_TOL: f64 = 1e-5;
/// Tolerance on the finite-difference relative error.
pub const GRAD_TOL: f64 = 1e-6;
/// Inputs closer than this to zero are redrawn, keeping ReLU kinks out of
/// the difference stencil.
pub const KINK_MARGIN: f64 = 1e-3;

/// One equivalence trial's shape and error.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivTrial {
    pub index: usize,
    pub n: usize,
    pub d: usize,
    pub e: usize,
    pub all_negative_q: bool,
    pub rel_err: f64,
}

impl EquivTrial {
    pub fn passed(&self) -> bool {
        self.rel_err <= EQUIV_TOL
    }
}

/// Runs `trials` random comparisons of the fused kernel (in precision `T`,
/// with epsilon `eps`) against the quadratic oracle in `f64`. Trial 0 uses an
/// all-negative query matrix so every denominator hits the epsilon floor.
pub fn equiv_trials<T: Scalar>(seed: u64, trials: usize, eps: f64) -> Result<Vec<EquivTrial>> {
    if trials == 0 {
        return config_err("at least one trial is required");
    }
    (0..trials)
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
            let n = rng.random_range(1..=32);
            let d = rng.random_range(1..=16);
            let e = rng.random_range(1..=16);
            let all_negative_q = index == 0;
            let mut q = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
            if all_negative_q {
                q = q.map(|x| -x.abs() - 0.1);
            }
            let k = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
            let v = Tensor::<f64>::randn(&[n, e], 1.0, &mut rng);
            let want = reference::naive_relu_linear_attention(&q, &k, &v, DEFAULT_EPS)?;
            let got = attention::relu_linear_attention(
                &q.cast::<T>(),
                &k.cast::<T>(),
                &v.cast::<T>(),
                T::lit(eps),
            )?;
            let rel_err = got.cast::<f64>().max_rel_diff(&want)?;
            Ok(EquivTrial {
                index,
                n,
                d,
                e,
                all_negative_q,
                rel_err: if rel_err.is_nan() {
                    f64::INFINITY
                } else {
                    rel_err
                },
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scope {
    Primitives,
    Attention,
    Blocks,
    Model,
    Distill,
}

impl Scope {
    pub const ALL: [Scope; 5] = [
        Self::Primitives,
        Self::Attention,
        Self::Blocks,
        Self::Model,
        Self::Distill,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Primitives => "primitives",
            Self::Attention => "attention",
            Self::Blocks => "blocks",
            Self::Model => "model",
            Self::Distill => "distill",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown scope `{s}` (expected primitives, attention, blocks, model, distill)"
                ))
            })
    }
}

/// Worst finite-difference error of one unit over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitReport {
    pub scope: Scope,
    pub name: String,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    pub seeds: usize,
}

impl UnitReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRAD_TOL
    }
}

/// Normal draws with every entry at least [`KINK_MARGIN`] from zero.
pub fn kink_free<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<f64> {
    let mut t = Tensor::<f64>::randn(shape, std, rng);
    for x in t.data_mut() {
        while x.abs() < KINK_MARGIN {
            *x = Tensor::<f64>::randn(&[1], std, rng).data()[0];
        }
    }
    t
}

type Graph = dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>;

/// Finite-difference check of `f` with respect to `inputs[arg]`, reduced to a
/// scalar by a fixed random weighting of the output.
pub fn check_arg(f: &Graph, inputs: &[Tensor<f64>], arg: usize, seed: u64) -> Result<f64> {
    let build = |tape: &mut Tape<f64>, x: Option<NodeId>| -> Result<Vec<NodeId>> {
        Ok(inputs
            .iter()
            .enumerate()
            .map(|(i, t)| match x {
                Some(x) if i == arg => x,
                _ => tape.leaf(t.clone()),
            })
            .collect())
    };
    let mut probe = Tape::new();
    let ids = build(&mut probe, None)?;
    let out = f(&mut probe, &ids)?;
    let shape = probe.value(out).shape().to_vec();
    let w = Tensor::<f64>::uniform(
        &shape,
        0.5,
        1.5,
        &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
    );
    let check = finite_diff_check(
        |tape, x| {
            let ids = build(tape, Some(x))?;
            let y = f(tape, &ids)?;
            let wl = tape.leaf(w.clone());
            let p = tape.mul(y, wl)?;
            Ok(tape.sum(p))
        },
        &inputs[arg],
        FD_STEP,
    )?;
    Ok(check.max_rel_err)
}

struct Unit {
    name: String,
    /// Builds inputs and graph for a seed; checks every listed argument.
    run: Box<dyn Fn(u64) -> Result<f64>>,
}

fn unit(name: impl Into<String>, run: impl Fn(u64) -> Result<f64> + 'static) -> Unit {
    Unit {
        name: name.into(),
        run: Box::new(run),
    }
}

/// Checks `f` with respect to each argument in `args`, returning the worst.
fn check_args(f: &Graph, inputs: &[Tensor<f64>], args: &[usize], seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for &a in args {
        let e = check_arg(f, inputs, a, seed.wrapping_add(a as u64))?;
        worst = if e.is_nan() {
            f64::INFINITY
        } else {
            worst.max(e)
        };
    }
    Ok(worst)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn primitive_units() -> Vec<Unit> {
    let mut u = Vec::new();
    u.push(unit("add", |s| {
        let mut r = rng(s);
        let ins = [
            kink_free(&[3, 4], 1.0, &mut r),
            kink_free(&[3, 4], 1.0, &mut r),
        ];
        check_args(&|t, x| t.add(x[0], x[1]), &ins, &[0, 1], s)
    }));
    u.push(unit("sub", |s| {
        let mut r = rng(s);
        let ins = [
            kink_free(&[3, 4], 1.0, &mut r),
            kink_free(&[3, 4], 1.0, &mut r),
        ];
        check_args(&|t, x| t.sub(x[0], x[1]), &ins, &[0, 1], s)
    }));
    u.push(unit("mul", |s| {
        let mut r = rng(s);
        let ins = [
            kink_free(&[3, 4], 1.0, &mut r),
            kink_free(&[3, 4], 1.0, &mut r),
        ];
        check_args(&|t, x| t.mul(x[0], x[1]), &ins, &[0, 1], s)
    }));
    u.push(unit("scale", |s| {
        let ins = [kink_free(&[5], 1.0, &mut rng(s))];
        check_args(&|t, x| Ok(t.scale(x[0], -1.7)), &ins, &[0], s)
    }));
    u.push(unit("matmul", |s| {
        let mut r = rng(s);
        let ins = [
            kink_free(&[3, 5], 1.0, &mut r),
            kink_free(&[5, 4], 1.0, &mut r),
        ];
        check_args(&|t, x| t.matmul(x[0], x[1]), &ins, &[0, 1], s)
    }));
    u.push(unit("transpose", |s| {
        let ins = [kink_free(&[3, 5], 1.0, &mut rng(s))];
        check_args(&|t, x| t.transpose(x[0]), &ins, &[0], s)
    }));
    u.push(unit("reshape+flatten", |s| {
        let ins = [kink_free(&[2, 3, 4], 1.0, &mut rng(s))];
        check_args(
            &|t, x| {
                let f = t.flatten_spatial(x[0])?;
                let u = t.unflatten_spatial(f, 3, 4)?;
                let y = t.mul(u, x[0])?;
                t.reshape(y, &[6, 4])
            },
            &ins,
            &[0],
            s,
        )
    }));
    for (name, spec, cin, cout, k) in [
        ("conv2d", Conv2dSpec::new(1, 1, 1), 3, 4, 3),
        ("conv2d_strided", Conv2dSpec::new(2, 1, 1), 2, 3, 3),
        ("conv2d_depthwise", Conv2dSpec::depthwise(3, 5), 3, 3, 5),
        ("conv2d_grouped", Conv2dSpec::new(1, 0, 2), 4, 2, 1),
    ] {
        u.push(unit(name, move |s| {
            let mut r = rng(s);
            let ins = [
                kink_free(&[cin, 5, 6], 1.0, &mut r),
                kink_free(&[cout, cin / spec.groups, k, k], 0.5, &mut r),
                kink_free(&[cout], 0.5, &mut r),
            ];
            check_args(
                &move |t, x| t.conv2d(x[0], x[1], Some(x[2]), spec),
                &ins,
                &[0, 1, 2],
                s,
            )
        }));
    }
    u.push(unit("relu", |s| {
        let ins = [kink_free(&[4, 5], 1.0, &mut rng(s))];
        check_args(&|t, x| Ok(t.relu(x[0])), &ins, &[0], s)
    }));
    u.push(unit("sigmoid", |s| {
        let ins = [kink_free(&[4, 5], 2.0, &mut rng(s))];
        check_args(&|t, x| Ok(t.sigmoid(x[0])), &ins, &[0], s)
    }));
    u.push(unit("gelu", |s| {
        let ins = [kink_free(&[4, 5], 2.0, &mut rng(s))];
        check_args(&|t, x| Ok(t.gelu(x[0])), &ins, &[0], s)
    }));
    u.push(unit("softmax_rows", |s| {
        let ins = [kink_free(&[3, 6], 2.0, &mut rng(s))];
        check_args(&|t, x| t.softmax_rows(x[0]), &ins, &[0], s)
    }));
    u.push(unit("layer_norm", |s| {
        let ins = [kink_free(&[4, 3, 3], 1.0, &mut rng(s))];
        check_args(
            &|t, x| {
                let a = t.layer_norm(x[0], 0)?;
                let b = t.layer_norm(x[0], 2)?;
                t.add(a, b)
            },
            &ins,
            &[0],
            s,
        )
    }));
    u.push(unit("channel_affine", |s| {
        let mut r = rng(s);
        let ins = [
            kink_free(&[3, 2, 4], 1.0, &mut r),
            kink_free(&[3], 1.0, &mut r),
            kink_free(&[3], 1.0, &mut r),
        ];
        check_args(
            &|t, x| t.channel_affine(x[0], x[1], x[2]),
            &ins,
            &[0, 1, 2],
            s,
        )
    }));
    u.push(unit("batch_norm", |s| {
        let mut r = rng(s);
        let ins = [
            kink_free(&[3, 2, 4], 1.0, &mut r),
            kink_free(&[3], 1.0, &mut r),
            kink_free(&[3], 1.0, &mut r),
            kink_free(&[3], 1.0, &mut r),
            Tensor::uniform(&[3], 0.5, 2.0, &mut r),
        ];
        check_args(
            &|t, x| t.batch_norm(x[0], x[1], x[2], x[3], x[4]),
            &ins,
            &[0, 1, 2, 3, 4],
            s,
        )
    }));
    u.push(unit("adaptive_avg_pool", |s| {
        let ins = [kink_free(&[2, 7, 5], 1.0, &mut rng(s))];
        check_args(&|t, x| t.adaptive_avg_pool(x[0], 3, 2), &ins, &[0], s)
    }));
    u.push(unit("upsample_nearest", |s| {
        let ins = [kink_free(&[2, 3, 2], 1.0, &mut rng(s))];
        check_args(&|t, x| t.upsample_nearest(x[0], 2), &ins, &[0], s)
    }));
    u.push(unit("add_row_bias", |s| {
        let mut r = rng(s);
        let ins = [
            kink_free(&[3, 4], 1.0, &mut r),
            kink_free(&[4], 1.0, &mut r),
        ];
        check_args(&|t, x| t.add_row_bias(x[0], x[1]), &ins, &[0, 1], s)
    }));
    u.push(unit("mean_rows", |s| {
        let ins = [kink_free(&[5, 3], 1.0, &mut rng(s))];
        check_args(&|t, x| t.mean_rows(x[0]), &ins, &[0], s)
    }));
    u.push(unit("relu_linear_attention", |s| {
        let mut r = rng(s);
        let ins = [
            kink_free(&[6, 4], 1.0, &mut r),
            kink_free(&[6, 4], 1.0, &mut r),
            kink_free(&[6, 3], 1.0, &mut r),
        ];
        let eps = DEFAULT_EPS;
        check_args(
            &move |t, x| t.relu_linear_attention(x[0], x[1], x[2], eps),
            &ins,
            &[0, 1, 2],
            s,
        )
    }));
    u.push(unit("cosine_loss", |s| {
        let mut r = rng(s);
        let ins = [
            kink_free(&[4, 5], 1.0, &mut r),
            kink_free(&[4, 5], 1.0, &mut r),
        ];
        check_args(&|t, x| t.cosine_loss(x[0], x[1]), &ins, &[0, 1], s)
    }));
    u
}

/// Unit for any `Ops`-generic map of one `C×H×W` input.
fn map_unit<F>(name: impl Into<String>, shape: [usize; 3], build: F) -> Unit
where
    F: Fn(u64) -> Result<Box<dyn Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>>> + 'static,
{
    unit(name, move |s| {
        let f = build(s)?;
        let ins = [kink_free(&shape, 1.0, &mut rng(s ^ 0xa11ce))];
        check_args(&move |t, x| f(t, x[0]), &ins, &[0], s)
    })
}

fn attention_units() -> Vec<Unit> {
    GateVariant::ALL
        .into_iter()
        .map(|gate| {
            map_unit(format!("rgma/{gate}"), [4, 3, 4], move |s| {
                let p = AttentionParams::<f64>::random(4, 0.5, &mut rng(s));
                Ok(Box::new(move |t: &mut Tape<f64>, x| {
                    attention::rgma_in(t, &x, &p, gate)
                }))
            })
        })
        .collect()
}

fn block_units() -> Vec<Unit> {
    let init = Init::random(0.4);
    let c = 4;
    let shape = [c, 5, 5];
    let mut u = vec![
        map_unit("elrf", shape, move |s| {
            let b = Elrf::<f64>::new(c, 2.0, init, &mut rng(s))?;
            Ok(Box::new(move |t: &mut Tape<f64>, x| b.forward(t, &x)))
        }),
        map_unit("ffn", shape, move |s| {
            let b = Ffn::<f64>::new(c, 2.0, init, &mut rng(s))?;
            Ok(Box::new(move |t: &mut Tape<f64>, x| b.forward(t, &x)))
        }),
        map_unit("mib", shape, move |s| {
            let b = Mib::<f64>::new(c, 2.0, init, &mut rng(s))?;
            Ok(Box::new(move |t: &mut Tape<f64>, x| b.forward(t, &x)))
        }),
        map_unit("cpe", shape, move |s| {
            let b = Cpe::<f64>::new(c, init, &mut rng(s));
            Ok(Box::new(move |t: &mut Tape<f64>, x| b.forward(t, &x)))
        }),
        map_unit("conv3post", shape, move |s| {
            let b = Conv3Post::<f64>::new(c, init, &mut rng(s));
            Ok(Box::new(move |t: &mut Tape<f64>, x| b.forward(t, &x)))
        }),
        map_unit("dwconv7", [c, 8, 8], move |s| {
            let b = DwConvBlock::<f64>::new(c, 7, 2.0, init, &mut rng(s))?;
            Ok(Box::new(move |t: &mut Tape<f64>, x| b.forward(t, &x)))
        }),
        map_unit("stem", [3, 8, 8], move |s| {
            let b = Stem::<f64>::new(3, c, init, &mut rng(s));
            Ok(Box::new(move |t: &mut Tape<f64>, x| b.forward(t, &x)))
        }),
        map_unit("downsample", [c, 6, 6], move |s| {
            let b = Downsample::<f64>::new(c, 6, init, &mut rng(s));
            Ok(Box::new(move |t: &mut Tape<f64>, x| b.forward(t, &x)))
        }),
    ];
    for kind in PostAttnKind::ALL {
        u.push(map_unit(
            format!("post_attention/{kind}"),
            shape,
            move |s| {
                let b = PostAttention::<f64>::new(kind, c, 2.0, init, &mut rng(s))?;
                Ok(Box::new(move |t: &mut Tape<f64>, x| b.forward(t, &x)))
            },
        ));
    }
    u.push(map_unit("rgma_block", [c, 3, 4], move |s| {
        let b = RgmaBlock::<f64>::new(
            c,
            GateVariant::GateFull,
            PostAttnKind::Conv3,
            2.0,
            init,
            &mut rng(s),
        )?;
        Ok(Box::new(move |t: &mut Tape<f64>, x| b.forward(t, &x)))
    }));
    u
}

fn model_units() -> Vec<Unit> {
    vec![map_unit("tiny_model", [3, 32, 32], |s| {
        let m = Model::<f64>::build_with(&ModelConfig::tiny(), s, Init::random(0.3))?;
        Ok(Box::new(move |t: &mut Tape<f64>, x| {
            let (logits, _) = m.forward_in(t, &x)?;
            Ok(logits)
        }))
    })]
}

/// Student stage maps on a 4×4 grid (16 tokens) with two teachers.
pub fn distill_fixture(
    seed: u64,
) -> (
    Vec<Tensor<f64>>,
    Vec<TeacherFeatures<f64>>,
    ProjectionHeads<f64>,
) {
    let mut r = rng(seed);
    let channels = [3usize, 4, 5, 6];
    let sides = [16usize, 8, 4, 2];
    let feats = channels
        .iter()
        .zip(sides)
        .map(|(&c, s)| kink_free(&[c, s, s], 1.0, &mut r))
        .collect();
    let teachers: Vec<TeacherFeatures<f64>> = [("a", 5usize), ("b", 3)]
        .iter()
        .map(|&(id, d)| {
            let p = Tensor::randn(&[16, d], 2.0, &mut r);
            let c = Tensor::randn(&[d], 2.0, &mut r);
            TeacherFeatures::new(id, p, c).expect("valid fixture")
        })
        .collect();
    let ids: Vec<(String, usize)> = teachers.iter().map(|t| (t.id.clone(), t.dim())).collect();
    let mut heads = ProjectionHeads::random(&channels, &ids, 0.5, &mut r);
    for h in &mut heads.heads {
        for a in h.patch.iter_mut().chain(h.cls.iter_mut()) {
            a.bias = Tensor::randn(a.bias.shape(), 0.5, &mut r);
        }
    }
    (feats, teachers, heads)
}

fn distill_units() -> Vec<Unit> {
    (0..4)
        .map(|stage| {
            unit(format!("multi_teacher_loss/stage{}", stage + 1), move |s| {
                let (feats, teachers, heads) = distill_fixture(s);
                check_args(
                    &move |t, x| {
                        let (total, _) = multi_teacher_loss_in(t, x, &teachers, &heads)?;
                        Ok(total)
                    },
                    &feats,
                    &[stage],
                    s,
                )
            })
        })
        .collect()
}

fn units(scope: Scope) -> Vec<Unit> {
    match scope {
        Scope::Primitives => primitive_units(),
        Scope::Attention => attention_units(),
        Scope::Blocks => block_units(),
        Scope::Model => model_units(),
        Scope::Distill => distill_units(),
    }
}

/// Runs every unit of `scope` on seeds `seed..seed + seeds`, in 64-bit.
pub fn gradcheck(scope: Scope, seed: u64, seeds: usize) -> Result<Vec<UnitReport>> {
    units(scope)
        .into_iter()
        .map(|u| {
            let mut worst = (0.0f64, seed);
            for s in seed..seed + seeds as u64 {
                let e = (u.run)(s)?;
                if e.is_nan() || e > worst.0 {
                    worst = (if e.is_nan() { f64::INFINITY } else { e }, s);
                }
            }
            Ok(UnitReport {
                scope,
                name: u.name,
                max_rel_err: worst.0,
                worst_seed: worst.1,
                seeds,
            })
        })
        .collect()
}

/// Eager output of a tiny model, used by determinism checks.
pub fn tiny_logits<T: Scalar>(seed: u64) -> Result<Tensor<T>> {
    let m = Model::<T>::build(&ModelConfig::tiny(), seed)?;
    let x = Tensor::<T>::randn(&[3, 32, 32], 1.0, &mut rng(seed));
    let (logits, _) = m.forward_in(&mut Eager::new(), &x)?;
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equivalence_passes_and_epsilon_zero_fails() {
        let trials = equiv_trials::<f64>(1, 20, DEFAULT_EPS).unwrap();
        assert!(trials.iter().all(EquivTrial::passed));
        assert!(trials[0].all_negative_q);
        let broken = equiv_trials::<f64>(1, 3, 0.0).unwrap();
        assert!(!broken[0].passed());
        assert!(broken[1..].iter().all(EquivTrial::passed));
    }

    #[test]
    fn kink_free_margin() {
        let t = kink_free(&[1000], 0.001, &mut rng(0));
        assert!(t.data().iter().all(|x| x.abs() >= KINK_MARGIN));
    }

    #[test]
    fn check_arg_on_square() {
        let ins = [kink_free(&[3], 1.0, &mut rng(1))];
        let e = check_arg(&|t, x| t.mul(x[0], x[0]), &ins, 0, 0).unwrap();
        assert!(e < GRAD_TOL);
    }

    #[test]
    fn scope_names() {
        for s in Scope::ALL {
            assert_eq!(s.as_str().parse::<Scope>().unwrap(), s);
        }
        assert!("everything".parse::<Scope>().is_err());
    }
}
