//! Prototype and similarity math over precomputed embeddings.
//!
//! Covers local/global/text prototypes with distance-based scores and
//! weighted decision fusion, the instance feature cache affinity, temperature
//! scaled cosine, Gaussian soft masks for masked pooling, nearest-support
//! classification, and query-aware prototype refinement.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::types::{BBox, Detection, EmbeddingKind, EmbeddingTable, ProbVector};

/// σ used in the distance-to-score transform.
pub const DEFAULT_PROTO_SIGMA: f64 = 0.5;
/// Temperature for scaled cosine similarity.
pub const DEFAULT_TAU: f64 = 0.07;
/// Standard deviation of the soft-mask Gaussian.
pub const DEFAULT_MASK_SIGMA: f64 = 2.0;
/// Proposal score cutoff ahead of nearest-support classification.
pub const NEAREST_BOX_THRESHOLD: f64 = 0.1;
/// ε in the cosine denominators of [`refine_prototypes`].
pub const REFINE_EPS: f64 = 1e-8;

fn check_dim(context: &str, expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::dims(context, expected, v.len()));
    }
    Ok(())
}

/// Weights of the five fused score sources.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w_local: f64,
    pub w_global: f64,
    pub w_text: f64,
    pub w_det: f64,
    pub w_aux: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights {
            w_local: 0.25,
            w_global: 0.15,
            w_text: 0.4,
            w_det: 0.1,
            w_aux: 0.1,
        }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_local, self.w_global, self.w_text, self.w_det, self.w_aux];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::param("fusion weights", "must be finite and >= 0"));
        }
        if all.iter().sum::<f64>() <= 0.0 {
            return Err(Error::param("fusion weights", "must not all be zero"));
        }
        Ok(())
    }
}

/// Per-class prototypes; any of the three may be absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototypes {
    pub local: Option<Vec<f64>>,
    pub global: Option<Vec<f64>>,
    pub text: Option<Vec<f64>>,
}

impl ClassPrototypes {
    pub fn get(&self, kind: EmbeddingKind) -> Option<&[f64]> {
        match kind {
            EmbeddingKind::Instance => self.local.as_deref(),
            EmbeddingKind::Image => self.global.as_deref(),
            EmbeddingKind::Text => self.text.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub dim: usize,
    pub classes: BTreeMap<u64, ClassPrototypes>,
}

impl PrototypeSet {
    /// `(class, kind)` pairs that were requested but have no records.
    pub fn missing(&self, kinds: &[EmbeddingKind]) -> Vec<(u64, EmbeddingKind)> {
        let mut out = Vec::new();
        for (c, p) in &self.classes {
            for &k in kinds {
                if p.get(k).is_none() {
                    out.push((*c, k));
                }
            }
        }
        out
    }

    /// Prototypes of `kind` in ascending class order, or `None` if any class lacks one.
    pub fn complete(&self, kind: EmbeddingKind) -> Option<Vec<&[f64]>> {
        self.classes.values().map(|p| p.get(kind)).collect()
    }

    pub fn class_ids(&self) -> Vec<u64> {
        self.classes.keys().copied().collect()
    }
}

/// Local prototypes are means of instance records, global prototypes means of
/// image records, and text prototypes the single text record of the class.
/// Classes lacking records of a requested kind keep that prototype absent.
pub fn build_prototypes(table: &EmbeddingTable, kinds: &[EmbeddingKind]) -> Result<PrototypeSet> {
    let mut grouped: BTreeMap<u64, BTreeMap<EmbeddingKind, Vec<&[f64]>>> = BTreeMap::new();
    for r in table.records() {
        let class = r
            .class_id
            .ok_or_else(|| Error::MissingClass(r.record_id.clone()))?;
        let slot = grouped.entry(class).or_default();
        if kinds.contains(&r.kind) {
            slot.entry(r.kind).or_default().push(&r.vector);
        }
    }
    let mut classes = BTreeMap::new();
    for (class, by_kind) in grouped {
        let mut p = ClassPrototypes::default();
        for (kind, vs) in by_kind {
            match kind {
                EmbeddingKind::Instance => p.local = linalg::mean_vector(&vs),
                EmbeddingKind::Image => p.global = linalg::mean_vector(&vs),
                EmbeddingKind::Text => {
                    if vs.len() > 1 {
                        return Err(Error::DuplicateText(class));
                    }
                    p.text = Some(vs[0].to_vec());
                }
            }
        }
        classes.insert(class, p);
    }
    Ok(PrototypeSet {
        dim: table.dim(),
        classes,
    })
}

/// Distance-based class scores `-(1/σ)·exp(norm(d_c))`, where `d_c` is the
/// Euclidean distance to each prototype and `norm` is min–max scaling across
/// classes (all-equal distances scale to 0). Scores are negative; pass them
/// through [`linalg::softmax`] when a distribution is wanted.
pub fn proto_scores<P: AsRef<[f64]>>(query: &[f64], protos: &[P], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::param("sigma", "must be positive"));
    }
    if protos.is_empty() {
        return Err(Error::param("prototypes", "need at least one class"));
    }
    let mut dist = Vec::with_capacity(protos.len());
    for (i, p) in protos.iter().enumerate() {
        let p = p.as_ref();
        check_dim(&format!("prototype {i}"), query.len(), p)?;
        dist.push(libm::sqrt(linalg::squared_distance(query, p)));
    }
    let lo = dist.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = dist.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(dist
        .into_iter()
        .map(|d| {
            let n = if span > 0.0 { (d - lo) / span } else { 0.0 };
            -libm::exp(n) / sigma
        })
        .collect())
}

/// Elementwise weighted sum `Σ w_i·s_i`.
pub fn fuse(sources: &[(&[f64], f64)]) -> Result<Vec<f64>> {
    let Some((first, _)) = sources.first() else {
        return Err(Error::param("sources", "need at least one"));
    };
    let n = first.len();
    let mut out = vec![0.0; n];
    for (i, (s, w)) in sources.iter().enumerate() {
        check_dim(&format!("fusion source {i}"), n, s)?;
        if !(w.is_finite() && *w >= 0.0) {
            return Err(Error::param("fusion weight", format!("source {i}: {w}")));
        }
        for (o, v) in out.iter_mut().zip(s.iter()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// [`fuse`] over probability vectors. The result is flagged normalized when
/// every input is and the weights sum to 1.
pub fn fuse_probs(sources: &[(&ProbVector, f64)]) -> Result<ProbVector> {
    let raw: Vec<(&[f64], f64)> = sources.iter().map(|(p, w)| (p.values(), *w)).collect();
    let values = fuse(&raw)?;
    let weight_sum: f64 = sources.iter().map(|(_, w)| w).sum();
    if sources.iter().all(|(p, _)| p.is_normalized()) && (weight_sum - 1.0).abs() <= 1e-12 {
        ProbVector::normalized(values)
    } else {
        Ok(ProbVector::raw(values))
    }
}

/// Cached support features with one-hot labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCache {
    features: Matrix,
    labels: Matrix,
    beta: f64,
}

impl FeatureCache {
    /// `class_index[j]` is the label column of row `j`; rows are L2-normalized here.
    pub fn new(features: &Matrix, class_index: &[usize], n_classes: usize, beta: f64) -> Result<Self> {
        if class_index.len() != features.rows() {
            return Err(Error::dims("cache labels", features.rows(), class_index.len()));
        }
        let mut labels = Matrix::zeros(features.rows(), n_classes);
        for (j, &c) in class_index.iter().enumerate() {
            if c >= n_classes {
                return Err(Error::param(
                    "class_index",
                    format!("row {j}: class {c} >= {n_classes}"),
                ));
            }
            labels.set(j, c, 1.0);
        }
        FeatureCache::from_parts(features, labels, beta)
    }

    /// Takes an explicit one-hot label matrix; every row must sum to 1.
    pub fn from_parts(features: &Matrix, labels: Matrix, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::param("beta", "must be positive"));
        }
        if labels.rows() != features.rows() {
            return Err(Error::dims("cache label rows", features.rows(), labels.rows()));
        }
        for (j, row) in labels.iter_rows().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 || row.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::param("labels", format!("row {j} is not one-hot")));
            }
        }
        let mut normed = features.clone();
        for j in 0..normed.rows() {
            if let Some(unit) = linalg::l2_normalized(normed.row(j)) {
                normed.row_mut(j).copy_from_slice(&unit);
            }
        }
        Ok(FeatureCache {
            features: normed,
            labels,
            beta,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &Matrix {
        &self.labels
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn n_classes(&self) -> usize {
        self.labels.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfcOutput {
    /// `exp(-β(1 - cos))` per cached row.
    pub affinity: Vec<f64>,
    /// `affinity · L_train`, one entry per class.
    pub logits: Vec<f64>,
}

/// Affinity of a query to every cached instance and the label-weighted
/// adaptation logits. The query is normalized first; a zero query (or zero
/// cached row) has cosine 0.
pub fn ifc_affinity(query: &[f64], cache: &FeatureCache) -> Result<IfcOutput> {
    check_dim("ifc query", cache.features.cols(), query)?;
    let q = linalg::l2_normalized(query).unwrap_or_else(|| vec![0.0; query.len()]);
    let affinity: Vec<f64> = cache
        .features
        .iter_rows()
        .map(|row| libm::exp(-cache.beta * (1.0 - linalg::dot(&q, row))))
        .collect();
    let mut logits = vec![0.0; cache.n_classes()];
    for (j, a) in affinity.iter().enumerate() {
        for (c, l) in logits.iter_mut().enumerate() {
            *l += a * cache.labels.get(j, c);
        }
    }
    Ok(IfcOutput { affinity, logits })
}

/// `cos(query, proto) / τ`; 0 when either vector is zero.
pub fn tempered_similarity(query: &[f64], proto: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::param("tau", "must be positive"));
    }
    check_dim("tempered prototype", query.len(), proto)?;
    Ok(linalg::cosine(query, proto) / tau)
}

/// [`tempered_similarity`] against each prototype.
pub fn tempered_scores<P: AsRef<[f64]>>(query: &[f64], protos: &[P], tau: f64) -> Result<Vec<f64>> {
    protos
        .iter()
        .map(|p| tempered_similarity(query, p.as_ref(), tau))
        .collect()
}

/// Normalized 1-D Gaussian taps over `[-r, r]` with `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = libm::ceil(3.0 * sigma) as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Symmetric reflection `d c b a | a b c d | d c b a` of index `i` into `0..n`.
pub fn reflect_index(i: i64, n: usize) -> usize {
    let period = 2 * n as i64;
    let m = i.rem_euclid(period);
    if m < n as i64 {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Gaussian soft mask: separable blur of a binary mask (reflect padding,
/// radius `⌈3σ⌉`) divided by its maximum, so the peak is exactly 1.
pub fn soft_mask(mask: &Matrix, sigma: f64) -> Result<Matrix> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param("sigma", "must be positive"));
    }
    if mask.as_slice().iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::param("mask", "entries must be 0 or 1"));
    }
    if mask.as_slice().iter().all(|v| *v == 0.0) {
        return Err(Error::EmptyMask);
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let (h, w) = (mask.rows(), mask.cols());

    let mut horiz = Matrix::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let xi = reflect_index(x as i64 + t as i64 - r, w);
                acc += k * mask.get(y, xi);
            }
            horiz.set(y, x, acc);
        }
    }
    let mut out = Matrix::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let yi = reflect_index(y as i64 + t as i64 - r, h);
                acc += k * horiz.get(yi, x);
            }
            out.set(y, x, acc);
        }
    }
    let peak = out.as_slice().iter().copied().fold(0.0, f64::max);
    for y in 0..h {
        for v in out.row_mut(y) {
            *v /= peak;
        }
    }
    Ok(out)
}

/// An `h × w` grid of `d`-dimensional features, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::dims("feature map buffer", height * width * dim, data.len()));
        }
        Ok(FeatureMap {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.dim;
        &self.data[start..start + self.dim]
    }
}

/// `Σ w·f / Σ w` over the spatial grid.
pub fn masked_mean(features: &FeatureMap, weights: &Matrix) -> Result<Vec<f64>> {
    if weights.rows() != features.height || weights.cols() != features.width {
        return Err(Error::ShapeMismatch {
            stage: "masked mean",
            detail: format!(
                "weights {}x{} vs features {}x{}",
                weights.rows(),
                weights.cols(),
                features.height,
                features.width
            ),
        });
    }
    let total: f64 = weights.as_slice().iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroWeight);
    }
    let mut acc = vec![0.0; features.dim];
    for y in 0..features.height {
        for x in 0..features.width {
            let w = weights.get(y, x);
            for (a, f) in acc.iter_mut().zip(features.cell(y, x)) {
                *a += w * f;
            }
        }
    }
    Ok(acc.into_iter().map(|a| a / total).collect())
}

/// Class of the most cosine-similar individual support vector, with that
/// cosine as confidence. Ties go to the lowest class id, then lowest index.
pub fn nearest_support(query: &[f64], supports: &[(Vec<f64>, u64)]) -> Result<(u64, f64)> {
    let mut best: Option<(f64, u64)> = None;
    for (i, (v, class)) in supports.iter().enumerate() {
        check_dim(&format!("support {i}"), query.len(), v)?;
        let c = linalg::cosine(query, v);
        let better = match best {
            None => true,
            Some((bc, bclass)) => c > bc || (c == bc && *class < bclass),
        };
        if better {
            best = Some((c, *class));
        }
    }
    best.map(|(c, class)| (class, c))
        .ok_or_else(|| Error::param("supports", "need at least one"))
}

/// A region proposal with its detector score and embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub image_id: u64,
    pub bbox: BBox,
    pub score: f64,
    pub vector: Vec<f64>,
}

/// Keeps proposals scoring above `box_threshold` and labels each with its
/// nearest support; the cosine, clamped to `[0, 1]`, becomes the score.
pub fn classify_proposals(
    proposals: &[Proposal],
    supports: &[(Vec<f64>, u64)],
    box_threshold: f64,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for p in proposals.iter().filter(|p| p.score > box_threshold) {
        let (class, conf) = nearest_support(&p.vector, supports)?;
        out.push(Detection::new(p.image_id, class, p.bbox, conf.clamp(0.0, 1.0))?);
    }
    Ok(out)
}

/// Projection and gate matrices for [`refine_prototypes`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineProjections {
    /// `d × d_k` query projection.
    pub w_q: Matrix,
    /// `d × d_k` key projection of the query patches.
    pub w_k1: Matrix,
    /// `d × d_k` key projection of the support patches.
    pub w_k2: Matrix,
    /// `d × d` value projection of the concatenated patches.
    pub w_v: Matrix,
    /// `d × d` gate weight.
    pub gate: Matrix,
    /// Length-`d` gate bias.
    pub gate_bias: Vec<f64>,
}

impl RefineProjections {
    pub fn identity(d: usize) -> Self {
        RefineProjections {
            w_q: Matrix::identity(d),
            w_k1: Matrix::identity(d),
            w_k2: Matrix::identity(d),
            w_v: Matrix::identity(d),
            gate: Matrix::identity(d),
            gate_bias: vec![0.0; d],
        }
    }

    fn validate(&self, d: usize) -> Result<usize> {
        let dk = self.w_q.cols();
        let shape = |stage: &'static str, m: &Matrix, rows: usize, cols: usize| {
            if m.rows() != rows || m.cols() != cols {
                Err(Error::ShapeMismatch {
                    stage,
                    detail: format!("expected {rows}x{cols}, got {}x{}", m.rows(), m.cols()),
                })
            } else {
                Ok(())
            }
        };
        shape("query projection", &self.w_q, d, dk)?;
        shape("query key projection", &self.w_k1, d, dk)?;
        shape("support key projection", &self.w_k2, d, dk)?;
        shape("value projection", &self.w_v, d, d)?;
        shape("gate", &self.gate, d, d)?;
        if self.gate_bias.len() != d {
            return Err(Error::ShapeMismatch {
                stage: "gate bias",
                detail: format!("expected {d}, got {}", self.gate_bias.len()),
            });
        }
        if dk == 0 {
            return Err(Error::ShapeMismatch {
                stage: "query projection",
                detail: "zero output dimension".into(),
            });
        }
        Ok(dk)
    }
}

fn row_softmax(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let s = linalg::softmax(m.row(i));
        out.row_mut(i).copy_from_slice(&s);
    }
    out
}

/// `a_i·b_j / (‖a_i‖‖b_j‖ + ε)` for every row pair.
fn eps_cosine(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let na = linalg::norm(a.row(i));
        for j in 0..b.rows() {
            let nb = linalg::norm(b.row(j));
            out.set(i, j, linalg::dot(a.row(i), b.row(j)) / (na * nb + REFINE_EPS));
        }
    }
    out
}

/// Mean over the K shots; shot `i` owns rows `i·m .. (i+1)·m`.
fn shot_mean(m: &Matrix, k_shot: usize) -> Matrix {
    let per = m.rows() / k_shot;
    let mut out = Matrix::zeros(per, m.cols());
    for p in 0..per {
        for i in 0..k_shot {
            for (o, v) in out.row_mut(p).iter_mut().zip(m.row(i * per + p)) {
                *o += v;
            }
        }
        for o in out.row_mut(p) {
            *o /= k_shot as f64;
        }
    }
    out
}

/// Query-aware prototype refinement.
///
/// `f_q` holds query patches (`n_q × d`); `f_s` holds support patches
/// (`n_s × d`, `n_s = K·m`, grouped by shot). In order:
/// self scores `QK₁ᵀ/√d_k`, ε-cosine cross scores between `Q` and `K₂`, a
/// row softmax over their concatenation, `F̂_q = F_q + A·V` with
/// `V = [F_q; F_s]·W_v`, support calibration `F̂_s = F_s + softmax(cos(F_s, F_q))·F̂_q`,
/// sigmoid gating `F̂_s ← σ(F̂_s·G + b) ⊙ F̂_s`, the shot mean `P`, and the
/// blend `α·P + (1-α)·mean_K(F_s)`. Returns the `m × d` refined prototype.
pub fn refine_prototypes(
    f_q: &Matrix,
    f_s: &Matrix,
    proj: &RefineProjections,
    alpha: f64,
    k_shot: usize,
) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param("alpha", "must lie in [0, 1]"));
    }
    if k_shot == 0 || f_s.rows() == 0 || f_s.rows() % k_shot != 0 {
        return Err(Error::ShapeMismatch {
            stage: "support patches",
            detail: format!("{} rows cannot be split into {k_shot} shots", f_s.rows()),
        });
    }
    if f_q.rows() == 0 {
        return Err(Error::ShapeMismatch {
            stage: "query patches",
            detail: "no rows".into(),
        });
    }
    let d = f_q.cols();
    if f_s.cols() != d {
        return Err(Error::ShapeMismatch {
            stage: "support patches",
            detail: format!("dimension {} vs query {d}", f_s.cols()),
        });
    }
    let dk = proj.validate(d)?;

    let q = f_q.matmul(&proj.w_q, "query projection")?;
    let k1 = f_q.matmul(&proj.w_k1, "query key projection")?;
    let k2 = f_s.matmul(&proj.w_k2, "support key projection")?;
    let v = f_q
        .vstack(f_s, "patch concatenation")?
        .matmul(&proj.w_v, "value projection")?;

    let scale = libm::sqrt(dk as f64);
    let mut a_self = q.matmul(&k1.transpose(), "self attention")?;
    for i in 0..a_self.rows() {
        for x in a_self.row_mut(i) {
            *x /= scale;
        }
    }
    let a_cross = eps_cosine(&q, &k2);
    let attn = row_softmax(&a_self.hstack(&a_cross, "attention concatenation")?);

    let mut f_q_hat = attn.matmul(&v, "attention values")?;
    for i in 0..f_q_hat.rows() {
        for (o, x) in f_q_hat.row_mut(i).iter_mut().zip(f_q.row(i)) {
            *o += x;
        }
    }

    let sim = row_softmax(&eps_cosine(f_s, f_q));
    let mut f_s_hat = sim.matmul(&f_q_hat, "support calibration")?;
    for i in 0..f_s_hat.rows() {
        for (o, x) in f_s_hat.row_mut(i).iter_mut().zip(f_s.row(i)) {
            *o += x;
        }
    }

    let gate = f_s_hat.matmul(&proj.gate, "gate")?;
    for i in 0..f_s_hat.rows() {
        for (j, x) in f_s_hat.row_mut(i).iter_mut().enumerate() {
            *x *= linalg::sigmoid(gate.get(i, j) + proj.gate_bias[j]);
        }
    }

    let refined = shot_mean(&f_s_hat, k_shot);
    let plain = shot_mean(f_s, k_shot);
    let mut out = Matrix::zeros(refined.rows(), d);
    for p in 0..refined.rows() {
        for j in 0..d {
            out.set(p, j, alpha * refined.get(p, j) + (1.0 - alpha) * plain.get(p, j));
        }
    }
    Ok(out)
}
