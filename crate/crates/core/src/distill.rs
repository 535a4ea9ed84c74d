//! Multi-teacher feature distillation loss.
//!
//! Teachers are plain feature providers: a patch-token matrix on the 1/16
//! grid and a summary vector. The student side is the four stage outputs of a
//! [`Model`], resampled onto that grid and mapped to each teacher's width by
//! per-(stage, teacher) affine heads. The heads live outside the model, so
//! dropping them leaves the student untouched.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Eager, Ops};
use crate::model::weights::TensorFile;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Floor on the per-dimension standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// One teacher's targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherFeatures<T: Scalar = f32> {
    pub id: String,
    /// `N×d_t`.
    pub patch_tokens: Tensor<T>,
    /// `d_t`.
    pub cls_token: Tensor<T>,
}

impl<T: Scalar> TeacherFeatures<T> {
    pub fn new(
        id: impl Into<String>,
        patch_tokens: Tensor<T>,
        cls_token: Tensor<T>,
    ) -> Result<Self> {
        let t = Self {
            id: id.into(),
            patch_tokens,
            cls_token,
        };
        t.validate()?;
        Ok(t)
    }

    /// Summary taken as the token mean of the patches.
    pub fn with_pooled_cls(id: impl Into<String>, patch_tokens: Tensor<T>) -> Result<Self> {
        let cls = cls_from_patches(&patch_tokens)?;
        Self::new(id, patch_tokens, cls)
    }

    pub fn dim(&self) -> usize {
        self.cls_token.len()
    }

    pub fn tokens(&self) -> usize {
        self.patch_tokens.dim(0)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.patch_tokens.rows_cols()?;
        if n == 0 || d == 0 {
            return Err(Error::Dimension(format!(
                "teacher `{}` has no tokens",
                self.id
            )));
        }
        if self.cls_token.shape() != [d] {
            return Err(Error::Dimension(format!(
                "teacher `{}`: summary has shape {:?}, patches have width {d}",
                self.id,
                self.cls_token.shape()
            )));
        }
        if !self.patch_tokens.is_finite() || !self.cls_token.is_finite() {
            return Err(Error::Evaluation(format!(
                "teacher `{}` has non-finite features",
                self.id
            )));
        }
        Ok(())
    }

    /// Reads every `teacher/<id>/patch` + `teacher/<id>/cls` pair, in file order.
    pub fn from_file(file: &TensorFile) -> Result<Vec<Self>> {
        let mut ids: Vec<&str> = Vec::new();
        for name in file.names() {
            if let Some(rest) = name.strip_prefix("teacher/") {
                if let Some((id, _)) = rest.rsplit_once('/') {
                    if !ids.contains(&id) {
                        ids.push(id);
                    }
                }
            }
        }
        ids.into_iter()
            .map(|id| {
                let patch = file.require(&format!("teacher/{id}/patch"))?.cast();
                let cls = file.require(&format!("teacher/{id}/cls"))?;
                let cls = cls.reshape(&[cls.len()])?.cast();
                Self::new(id, patch, cls)
            })
            .collect()
    }

    pub fn write_to(&self, file: &mut TensorFile) {
        file.push(format!("teacher/{}/patch", self.id), &self.patch_tokens);
        file.push(format!("teacher/{}/cls", self.id), &self.cls_token);
    }
}

/// Mean over the token axis: `N×d` → `d`.
pub fn cls_from_patches<T: Scalar>(patch_tokens: &Tensor<T>) -> Result<Tensor<T>> {
    let m = tensor::mean_rows(patch_tokens)?;
    m.reshape(&[m.len()])
}

/// Per-dimension zero mean, unit variance over tokens (population variance,
/// standard deviation floored at [`STD_FLOOR`]).
pub fn standardize_features<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = f.rows_cols()?;
    if n == 0 {
        return Err(Error::Dimension("cannot standardize zero tokens".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut mean = vec![0.0f64; d];
    for row in f.data().chunks(d) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_n);
    let mut var = vec![0.0f64; d];
    for row in f.data().chunks(d) {
        for ((v, &x), m) in var.iter_mut().zip(row).zip(&mean) {
            let c = x.as_f64() - m;
            *v += c * c;
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v * inv_n).sqrt().max(STD_FLOOR))
        .collect();
    Ok(Tensor::from_fn(&[n, d], |i| {
        let j = i % d;
        T::lit((f.data()[i].as_f64() - mean[j]) * inv_std[j])
    }))
}

/// Standardizes a single summary vector across its own entries.
pub fn standardize_vector<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    let col = v.reshape(&[v.len(), 1])?;
    standardize_features(&col)?.reshape(&[v.len()])
}

/// `mean_i (1 − cos(a_i, b_i))` over rows, norms floored at `1e-8`.
pub fn cosine_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    tensor::cosine_loss(a, b)
}

/// Affine map from one stage's width to one teacher's width.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T: Scalar = f32> {
    /// `C_stage × d_t`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Affine<T> {
    pub fn zeros(c: usize, d: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[c, d]),
            bias: Tensor::zeros(&[d]),
        }
    }

    fn forward<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let y = g.matmul_param(x, &self.weight)?;
        g.add_row_bias(&y, &self.bias)
    }
}

/// Patch and summary heads for one teacher, one of each per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherHead<T: Scalar = f32> {
    pub teacher: String,
    pub patch: Vec<Affine<T>>,
    pub cls: Vec<Affine<T>>,
}

/// All projection heads, in teacher order.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads<T: Scalar = f32> {
    pub heads: Vec<TeacherHead<T>>,
}

impl<T: Scalar> ProjectionHeads<T> {
    /// Zero heads for the given stage widths and `(teacher id, width)` list.
    pub fn zeros(stage_channels: &[usize], teachers: &[(String, usize)]) -> Self {
        Self {
            heads: teachers
                .iter()
                .map(|(id, d)| TeacherHead {
                    teacher: id.clone(),
                    patch: stage_channels
                        .iter()
                        .map(|&c| Affine::zeros(c, *d))
                        .collect(),
                    cls: stage_channels
                        .iter()
                        .map(|&c| Affine::zeros(c, *d))
                        .collect(),
                })
                .collect(),
        }
    }

    /// Truncated-normal weights, zero biases.
    pub fn random<R: Rng + ?Sized>(
        stage_channels: &[usize],
        teachers: &[(String, usize)],
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut heads = Self::zeros(stage_channels, teachers);
        for h in &mut heads.heads {
            for a in h.patch.iter_mut().chain(h.cls.iter_mut()) {
                a.weight = Tensor::trunc_normal(a.weight.shape(), std, rng);
            }
        }
        heads
    }

    pub fn for_teacher(&self, id: &str) -> Result<&TeacherHead<T>> {
        self.heads
            .iter()
            .find(|h| h.teacher == id)
            .ok_or_else(|| Error::Missing(format!("head/{id}")))
    }

    pub fn param_count(&self) -> usize {
        self.heads
            .iter()
            .flat_map(|h| h.patch.iter().chain(&h.cls))
            .map(|a| a.weight.len() + a.bias.len())
            .sum()
    }

    pub fn write_to(&self, file: &mut TensorFile) {
        for h in &self.heads {
            for (i, (p, c)) in h.patch.iter().zip(&h.cls).enumerate() {
                let base = format!("head/{}/stage{}", h.teacher, i + 1);
                file.push(format!("{base}/patch_w"), &p.weight);
                file.push(format!("{base}/patch_b"), &p.bias);
                file.push(format!("{base}/cls_w"), &c.weight);
                file.push(format!("{base}/cls_b"), &c.bias);
            }
        }
    }

    /// Reads heads for the given teachers and stage count.
    pub fn from_file(file: &TensorFile, teachers: &[String], stages: usize) -> Result<Self> {
        let get = |name: String| -> Result<Tensor<T>> { Ok(file.require(&name)?.cast()) };
        let mut heads = Vec::with_capacity(teachers.len());
        for id in teachers {
            let mut patch = Vec::with_capacity(stages);
            let mut cls = Vec::with_capacity(stages);
            for i in 1..=stages {
                let base = format!("head/{id}/stage{i}");
                patch.push(Affine {
                    weight: get(format!("{base}/patch_w"))?,
                    bias: get(format!("{base}/patch_b"))?,
                });
                cls.push(Affine {
                    weight: get(format!("{base}/cls_w"))?,
                    bias: get(format!("{base}/cls_b"))?,
                });
            }
            heads.push(TeacherHead {
                teacher: id.clone(),
                patch,
                cls,
            });
        }
        Ok(Self { heads })
    }

    /// Whether the file carries any head tensors.
    pub fn present_in(file: &TensorFile) -> bool {
        file.names().any(|n| n.starts_with("head/"))
    }
}

/// Total loss and its per-teacher terms, in teacher order.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillLoss<T = f32> {
    pub total: T,
    pub per_teacher: Vec<(String, T)>,
}

/// Grid of the 1/16-scale stage (the third of four), as `(h, w)`.
fn target_grid<T: Scalar, G: Ops<T>>(g: &G, feats: &[G::Var]) -> Result<(usize, usize)> {
    let i = feats.len().min(3).saturating_sub(1);
    let f = feats
        .get(i)
        .ok_or_else(|| Error::Dimension("no student features".into()))?;
    let (_, h, w) = g.value(f).chw()?;
    Ok((h, w))
}

/// Brings a stage map onto the target grid: average pooling from finer
/// grids, nearest upsampling from coarser ones.
fn resample<T: Scalar, G: Ops<T>>(g: &mut G, x: &G::Var, gh: usize, gw: usize) -> Result<G::Var> {
    let (_, h, w) = g.value(x).chw()?;
    if h >= gh && w >= gw {
        return g.adaptive_avg_pool(x, gh, gw);
    }
    if gh.is_multiple_of(h) && gw.is_multiple_of(w) && gh / h == gw / w {
        return g.upsample_nearest(x, gh / h);
    }
    Err(Error::Alignment(format!(
        "cannot resample a {h}×{w} map onto the {gh}×{gw} grid"
    )))
}

/// The projected student patches and summary for one teacher.
pub fn project_in<T: Scalar, G: Ops<T>>(
    g: &mut G,
    feats: &[G::Var],
    head: &TeacherHead<T>,
) -> Result<(G::Var, G::Var)> {
    if head.patch.len() != feats.len() || head.cls.len() != feats.len() {
        return Err(Error::Dimension(format!(
            "head for `{}` covers {} stages, student has {}",
            head.teacher,
            head.patch.len(),
            feats.len()
        )));
    }
    let (gh, gw) = target_grid(g, feats)?;
    let mut patches: Option<G::Var> = None;
    let mut cls: Option<G::Var> = None;
    for (f, (ph, ch)) in feats.iter().zip(head.patch.iter().zip(&head.cls)) {
        let grid = resample(g, f, gh, gw)?;
        let tokens = g.flatten_spatial(&grid)?;
        let p = ph.forward(g, &tokens)?;
        patches = Some(match patches {
            Some(acc) => g.add(&acc, &p)?,
            None => p,
        });
        let own = g.flatten_spatial(f)?;
        let pooled = g.mean_rows(&own)?;
        let c = ch.forward(g, &pooled)?;
        cls = Some(match cls {
            Some(acc) => g.add(&acc, &c)?,
            None => c,
        });
    }
    match (patches, cls) {
        (Some(p), Some(c)) => Ok((p, c)),
        _ => Err(Error::Dimension("no student features".into())),
    }
}

/// `mean_t [cos_loss(patches_t, std(P_t)) + cos_loss(cls_t, std(c_t))]`
/// under any executor. Returns the total and the per-teacher terms.
pub fn multi_teacher_loss_in<T: Scalar, G: Ops<T>>(
    g: &mut G,
    feats: &[G::Var],
    teachers: &[TeacherFeatures<T>],
    heads: &ProjectionHeads<T>,
) -> Result<(G::Var, Vec<G::Var>)> {
    if teachers.is_empty() {
        return Err(Error::Config("at least one teacher is required".into()));
    }
    let (gh, gw) = target_grid(g, feats)?;
    let mut terms = Vec::with_capacity(teachers.len());
    for t in teachers {
        t.validate()?;
        if t.tokens() != gh * gw {
            return Err(Error::Alignment(format!(
                "teacher `{}` has {} tokens, the student grid has {gh}×{gw} = {}",
                t.id,
                t.tokens(),
                gh * gw
            )));
        }
        let head = heads.for_teacher(&t.id)?;
        let (p, c) = project_in(g, feats, head)?;
        let target_p = standardize_features(&t.patch_tokens)?;
        let target_c = standardize_vector(&t.cls_token)?.reshape(&[1, t.dim()])?;
        if g.value(&p).shape() != target_p.shape() {
            return Err(Error::Dimension(format!(
                "projection for `{}` has shape {:?}, teacher patches {:?}",
                t.id,
                g.value(&p).shape(),
                target_p.shape()
            )));
        }
        let lp = g.cosine_loss(&p, &target_p)?;
        let lc = g.cosine_loss(&c, &target_c)?;
        terms.push(g.add(&lp, &lc)?);
    }
    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = g.add(&total, t)?;
    }
    let total = g.scale(&total, T::lit(1.0 / teachers.len() as f64));
    Ok((total, terms))
}

/// Eager evaluation of [`multi_teacher_loss_in`].
pub fn multi_teacher_loss<T: Scalar>(
    stage_features: &[Tensor<T>],
    teachers: &[TeacherFeatures<T>],
    heads: &ProjectionHeads<T>,
) -> Result<DistillLoss<T>> {
    let mut g = Eager::new();
    let (total, terms) = multi_teacher_loss_in(&mut g, stage_features, teachers, heads)?;
    Ok(DistillLoss {
        total: total.data()[0],
        per_teacher: teachers
            .iter()
            .zip(terms)
            .map(|(t, v)| (t.id.clone(), v.data()[0]))
            .collect(),
    })
}

/// A student with attached projection heads. The heads never feed the
/// student's own forward pass.
#[derive(Clone, Debug)]
pub struct Distiller<T: Scalar = f32> {
    pub student: Model<T>,
    pub heads: ProjectionHeads<T>,
}

impl<T: Scalar> Distiller<T> {
    pub fn new<R: Rng + ?Sized>(
        student: Model<T>,
        teachers: &[(String, usize)],
        rng: &mut R,
    ) -> Self {
        let heads = ProjectionHeads::random(&student.config.channels, teachers, 0.02, rng);
        Self { student, heads }
    }

    pub fn loss(&self, x: &Tensor<T>, teachers: &[TeacherFeatures<T>]) -> Result<DistillLoss<T>> {
        let out = self.student.forward(x)?;
        multi_teacher_loss(&out.stage_features, teachers, &self.heads)
    }

    /// Drops the heads and returns the bare student.
    pub fn into_student(self) -> Model<T> {
        self.student
    }
}

/// Stage features as stored in a tensor file (`stage/1` … `stage/4`).
pub fn stage_features_from_file<T: Scalar>(file: &TensorFile) -> Result<Vec<Tensor<T>>> {
    (1..=4)
        .map(|i| Ok(file.require(&format!("stage/{i}"))?.cast()))
        .collect()
}

pub fn stage_features_to_file<T: Scalar>(feats: &[Tensor<T>], file: &mut TensorFile) {
    for (i, f) in feats.iter().enumerate() {
        file.push(format!("stage/{}", i + 1), f);
    }
}
