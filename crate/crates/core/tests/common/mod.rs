//! Independent reference implementations and random-input generators shared
//! by the integration tests. Everything here works on plain vectors and
//! nested loops so it shares no code path with the library.

#![allow(dead_code)]

use cdfsod_core::{BBox, Category, DatasetIndex, Detection, ImageInfo, RawAnnotation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Grid = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn all_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| close(*x, *y, tol))
}

// ---------------------------------------------------------------- boxes

/// IoU of `[x0, y0, x1, y1]` corner arrays.
pub fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn corners(b: &BBox) -> [f64; 4] {
    [b.x_min(), b.y_min(), b.x_max(), b.y_max()]
}

/// A box on an integer grid inside `0..=span`, so overlaps and exact IoU
/// ties are common.
pub fn grid_box(r: &mut impl Rng, span: u32) -> [f64; 4] {
    let x0 = r.gen_range(0..span) as f64;
    let y0 = r.gen_range(0..span) as f64;
    let w = r.gen_range(1..=span / 2 + 1) as f64;
    let h = r.gen_range(1..=span / 2 + 1) as f64;
    [x0, y0, x0 + w, y0 + h]
}

/// Scores drawn from a coarse lattice so equal scores occur.
pub fn lattice_score(r: &mut impl Rng) -> f64 {
    r.gen_range(1..=10) as f64 / 10.0
}

pub fn random_detections(r: &mut impl Rng, n: usize, images: u64, classes: u64) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let c = grid_box(r, 12);
            Detection::new(
                r.gen_range(1..=images),
                r.gen_range(1..=classes),
                BBox::new(c[0], c[1], c[2], c[3]).unwrap(),
                lattice_score(r),
            )
            .unwrap()
        })
        .collect()
}

/// Greedy O(n²) suppression: visit in (score desc, index asc) order and keep a
/// box unless a kept box of the same image and class overlaps it by more
/// than `thr`.
pub fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let n = dets.len();
    let mut order: Vec<usize> = (0..n).collect();
    // selection sort, to avoid relying on the library's sort of choice
    for i in 0..n {
        let mut best = i;
        for j in i + 1..n {
            let (a, b) = (&dets[order[j]], &dets[order[best]]);
            if a.score() > b.score() || (a.score() == b.score() && order[j] < order[best]) {
                best = j;
            }
        }
        order.swap(i, best);
    }
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let d = &dets[i];
        let suppressed = kept.iter().any(|&k| {
            let o = &dets[k];
            o.image_id == d.image_id
                && o.category_id == d.category_id
                && box_iou(corners(&o.bbox), corners(&d.bbox)) > thr
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

// ---------------------------------------------------------------- mAP

pub struct RandomDataset {
    pub index: DatasetIndex,
    pub dets: Vec<Detection>,
}

/// `≤ 5` images, `≤ 4` classes, `≤ 12` ground-truth boxes and up to 12
/// detections, some of them jittered copies of ground truth.
pub fn random_eval_instance(r: &mut impl Rng) -> RandomDataset {
    let n_img = r.gen_range(1..=5u64);
    let n_cls = r.gen_range(1..=4u64);
    let images = (1..=n_img)
        .map(|id| ImageInfo {
            id,
            width: 40.0,
            height: 40.0,
            file_name: format!("{id}.png"),
        })
        .collect();
    let cats = (1..=n_cls)
        .map(|id| Category {
            id,
            name: format!("c{id}"),
        })
        .collect();
    let n_gt = r.gen_range(1..=12u64);
    let mut anns = Vec::new();
    for id in 1..=n_gt {
        let c = grid_box(r, 20);
        anns.push(RawAnnotation {
            id: id * 3 % 37 + 100 * id,
            image_id: r.gen_range(1..=n_img),
            category_id: r.gen_range(1..=n_cls),
            bbox: [c[0], c[1], c[2] - c[0], c[3] - c[1]],
        });
    }
    let n_det = r.gen_range(0..=12usize);
    let mut dets = Vec::new();
    for _ in 0..n_det {
        let (img, cls, c) = if r.gen_bool(0.6) {
            let a = &anns[r.gen_range(0..anns.len())];
            let jx = r.gen_range(-2..=2) as f64;
            let jy = r.gen_range(-2..=2) as f64;
            let b = a.bbox;
            let cls = if r.gen_bool(0.85) { a.category_id } else { r.gen_range(1..=n_cls) };
            (a.image_id, cls, [b[0] + jx, b[1] + jy, b[0] + b[2] + jx, b[1] + b[3] + jy])
        } else {
            (r.gen_range(1..=n_img), r.gen_range(1..=n_cls), grid_box(r, 20))
        };
        dets.push(
            Detection::new(img, cls, BBox::new(c[0], c[1], c[2], c[3]).unwrap(), lattice_score(r)).unwrap(),
        );
    }
    let (index, _) = DatasetIndex::from_parts(images, cats, anns).unwrap();
    RandomDataset { index, dets }
}

/// Brute-force COCO-style mAP in percent over classes that have ground truth.
pub fn map_oracle(dets: &[Detection], ds: &DatasetIndex, thresholds: &[f64], max_dets: usize) -> f64 {
    let mut classes: Vec<u64> = ds.annotations().iter().map(|a| a.category_id).collect();
    classes.sort();
    classes.dedup();
    let mut total = 0.0;
    for &t in thresholds {
        let mut class_sum = 0.0;
        for &c in &classes {
            class_sum += ap_oracle(dets, ds, c, t, max_dets);
        }
        total += class_sum / classes.len() as f64;
    }
    100.0 * total / thresholds.len() as f64
}

fn ap_oracle(dets: &[Detection], ds: &DatasetIndex, class: u64, t: f64, max_dets: usize) -> f64 {
    let gts: Vec<_> = ds.annotations().iter().filter(|g| g.category_id == class).collect();
    // ranking: score desc, then input position
    let mut cand: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].category_id == class).collect();
    cand.sort_by(|&a, &b| {
        dets[b]
            .score()
            .partial_cmp(&dets[a].score())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut per_image = std::collections::HashMap::new();
    let ranked: Vec<usize> = cand
        .into_iter()
        .filter(|&i| {
            let n = per_image.entry(dets[i].image_id).or_insert(0usize);
            *n += 1;
            *n <= max_dets
        })
        .collect();

    let mut used = vec![false; gts.len()];
    let mut tps = Vec::new();
    for &i in &ranked {
        let d = &dets[i];
        let mut best: Option<usize> = None;
        for (gi, g) in gts.iter().enumerate() {
            if used[gi] || g.image_id != d.image_id {
                continue;
            }
            let o = box_iou(corners(&d.bbox), corners(&g.bbox));
            if o < t {
                continue;
            }
            best = match best {
                None => Some(gi),
                Some(b) => {
                    let ob = box_iou(corners(&d.bbox), corners(&gts[b].bbox));
                    if o > ob || (o == ob && g.annotation_id < gts[b].annotation_id) {
                        Some(gi)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        if let Some(b) = best {
            used[b] = true;
        }
        tps.push(best.is_some());
    }

    let n_gt = gts.len() as f64;
    let mut points = Vec::new();
    let mut tp = 0.0;
    for (k, hit) in tps.iter().enumerate() {
        if *hit {
            tp += 1.0;
        }
        points.push((tp / n_gt, tp / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for j in 0..=100 {
        let level = j as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(rec, _)| *rec >= level)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / 101.0
}

// ---------------------------------------------------------------- vectors

pub fn random_vec(r: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.gen_range(-1.0..1.0)).collect()
}

pub fn random_grid(r: &mut impl Rng, rows: usize, cols: usize) -> Grid {
    (0..rows).map(|_| random_vec(r, cols)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn length(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let n = length(a) * length(b);
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

pub fn unit(a: &[f64]) -> Vec<f64> {
    let n = length(a);
    a.iter().map(|x| x / n).collect()
}

pub fn mat_mul(a: &Grid, b: &Grid) -> Grid {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Grid) -> Grid {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn softmax_row(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn identity(d: usize) -> Grid {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// `−(1/σ)·exp(minmax(‖q − p_c‖))`.
pub fn proto_scores_oracle(q: &[f64], protos: &Grid, sigma: f64) -> Vec<f64> {
    let d: Vec<f64> = protos
        .iter()
        .map(|p| q.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    d.iter()
        .map(|x| {
            let n = if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
            -(1.0 / sigma) * n.exp()
        })
        .collect()
}

pub fn fuse_oracle(sources: &[(Vec<f64>, f64)]) -> Vec<f64> {
    let mut out = vec![0.0; sources[0].0.len()];
    for (s, w) in sources {
        for i in 0..out.len() {
            out[i] += w * s[i];
        }
    }
    out
}

/// Returns `(affinity, logits)` for a cache of rows with class labels.
pub fn ifc_oracle(q: &[f64], rows: &Grid, labels: &[usize], n_classes: usize, beta: f64) -> (Vec<f64>, Vec<f64>) {
    let qn = unit(q);
    let mut aff = Vec::new();
    for r in rows {
        aff.push((-beta * (1.0 - dot(&qn, &unit(r)))).exp());
    }
    let mut logits = vec![0.0; n_classes];
    for (j, a) in aff.iter().enumerate() {
        for c in 0..n_classes {
            let one_hot = if labels[j] == c { 1.0 } else { 0.0 };
            logits[c] += a * one_hot;
        }
    }
    (aff, logits)
}

fn reflect(i: i64, n: i64) -> usize {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Direct 2-D convolution with the outer-product Gaussian kernel, then
/// division by the maximum.
pub fn soft_mask_oracle(mask: &Grid, sigma: f64) -> Grid {
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = raw.iter().sum();
    let g: Vec<f64> = raw.iter().map(|v| v / z).collect();
    let (h, w) = (mask.len() as i64, mask[0].len() as i64);
    let mut out = vec![vec![0.0; w as usize]; h as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let v = mask[reflect(y + dy, h)][reflect(x + dx, w)];
                    acc += g[(dy + r) as usize] * g[(dx + r) as usize] * v;
                }
            }
            out[y as usize][x as usize] = acc;
        }
    }
    let peak = out.iter().flatten().cloned().fold(0.0, f64::max);
    for row in &mut out {
        for v in row.iter_mut() {
            *v /= peak;
        }
    }
    out
}

/// `features[y][x]` is a d-vector.
pub fn masked_mean_oracle(features: &[Vec<Vec<f64>>], weights: &Grid) -> Vec<f64> {
    let d = features[0][0].len();
    let mut num = vec![0.0; d];
    let mut den = 0.0;
    for y in 0..weights.len() {
        for x in 0..weights[0].len() {
            den += weights[y][x];
            for k in 0..d {
                num[k] += weights[y][x] * features[y][x][k];
            }
        }
    }
    num.iter().map(|v| v / den).collect()
}

/// Exhaustive scan; ties broken by class id then position.
pub fn nearest_oracle(q: &[f64], supports: &[(Vec<f64>, u64)]) -> (u64, f64) {
    let mut best = 0;
    for i in 1..supports.len() {
        let (ci, cb) = (cos(q, &supports[i].0), cos(q, &supports[best].0));
        if ci > cb || (ci == cb && supports[i].1 < supports[best].1) {
            best = i;
        }
    }
    (supports[best].1, cos(q, &supports[best].0))
}

pub struct Projections {
    pub w_q: Grid,
    pub w_k1: Grid,
    pub w_k2: Grid,
    pub w_v: Grid,
    pub gate: Grid,
    pub bias: Vec<f64>,
}

fn eps_cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (length(a) * length(b) + 1e-8)
}

/// Step-by-step transcription of query-aware prototype refinement.
pub fn refine_oracle(f_q: &Grid, f_s: &Grid, p: &Projections, alpha: f64, k: usize) -> Grid {
    let d = f_q[0].len();
    let dk = p.w_q[0].len() as f64;
    let q = mat_mul(f_q, &p.w_q);
    let k1 = mat_mul(f_q, &p.w_k1);
    let k2 = mat_mul(f_s, &p.w_k2);
    let mut both = f_q.clone();
    both.extend(f_s.iter().cloned());
    let v = mat_mul(&both, &p.w_v);

    let mut f_q_hat = Vec::new();
    for i in 0..q.len() {
        let mut logits = Vec::new();
        for j in 0..k1.len() {
            logits.push(dot(&q[i], &k1[j]) / dk.sqrt());
        }
        for j in 0..k2.len() {
            logits.push(eps_cos(&q[i], &k2[j]));
        }
        let a = softmax_row(&logits);
        let mut row = f_q[i].clone();
        for (j, aj) in a.iter().enumerate() {
            for c in 0..d {
                row[c] += aj * v[j][c];
            }
        }
        f_q_hat.push(row);
    }

    let mut f_s_hat = Vec::new();
    for i in 0..f_s.len() {
        let sims: Vec<f64> = f_q.iter().map(|fq| eps_cos(&f_s[i], fq)).collect();
        let s = softmax_row(&sims);
        let mut row = f_s[i].clone();
        for (j, sj) in s.iter().enumerate() {
            for c in 0..d {
                row[c] += sj * f_q_hat[j][c];
            }
        }
        let g = mat_mul(&vec![row.clone()], &p.gate);
        for c in 0..d {
            row[c] *= 1.0 / (1.0 + (-(g[0][c] + p.bias[c])).exp());
        }
        f_s_hat.push(row);
    }

    let m = f_s.len() / k;
    let mut out = Vec::new();
    for patch in 0..m {
        let mut refined = vec![0.0; d];
        let mut plain = vec![0.0; d];
        for shot in 0..k {
            for c in 0..d {
                refined[c] += f_s_hat[shot * m + patch][c] / k as f64;
                plain[c] += f_s[shot * m + patch][c] / k as f64;
            }
        }
        out.push((0..d).map(|c| alpha * refined[c] + (1.0 - alpha) * plain[c]).collect());
    }
    out
}

// ---------------------------------------------------------------- domain

pub fn mmd_oracle(x: &Grid, y: &Grid, bandwidths: &[f64]) -> f64 {
    let k = |a: &[f64], b: &[f64], s: f64| {
        let mut d2 = 0.0;
        for i in 0..a.len() {
            d2 += (a[i] - b[i]) * (a[i] - b[i]);
        }
        (-d2 / (2.0 * s * s)).exp()
    };
    let mut total = 0.0;
    for &s in bandwidths {
        let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
        for a in x {
            for b in x {
                xx += k(a, b, s);
            }
        }
        for a in y {
            for b in y {
                yy += k(a, b, s);
            }
        }
        for a in x {
            for b in y {
                xy += k(a, b, s);
            }
        }
        let (n, m) = (x.len() as f64, y.len() as f64);
        total += xx / (n * n) + yy / (m * m) - 2.0 * xy / (n * m);
    }
    total / bandwidths.len() as f64
}

// ---------------------------------------------------------------- episodes

/// Random dataset with every class holding at least `min_per_class` instances.
pub fn random_episode_dataset(r: &mut impl Rng, min_per_class: usize) -> DatasetIndex {
    let n_img = r.gen_range(4..=30u64);
    let n_cls = r.gen_range(1..=5u64);
    let images = (1..=n_img)
        .map(|id| ImageInfo {
            id,
            width: 64.0,
            height: 64.0,
            file_name: format!("img{id}.jpg"),
        })
        .collect();
    let cats = (1..=n_cls).map(|id| Category { id, name: format!("k{id}") }).collect();
    let mut anns = Vec::new();
    let mut next = 1;
    for c in 1..=n_cls {
        let count = min_per_class + r.gen_range(0..6usize);
        for _ in 0..count {
            anns.push(RawAnnotation {
                id: next,
                image_id: r.gen_range(1..=n_img),
                category_id: c,
                bbox: [1.0, 1.0, 5.0, 5.0],
            });
            next += 1;
        }
    }
    DatasetIndex::from_parts(images, cats, anns).unwrap().0
}
