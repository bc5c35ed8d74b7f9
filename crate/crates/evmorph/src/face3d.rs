//! 3D morphable models: identity PCA model, AU dictionary model, synthesis.
//!
//! A morphable model generates a face mesh as `S = T + C*alpha` from a
//! template `T`, a 3N x K component matrix `C` and coefficients `alpha`.
//! Vertices are flattened vertex-major (vertex v occupies rows 3v..3v+3,
//! ordered x, y, z).
//!
//! ```
//! use evmorph::face3d::{synthesize, Mesh, ModelKind, MorphableModel};
//! use nalgebra::{DMatrix, DVector};
//!
//! // Two vertices at the origin; one component that lifts vertex 0 in y.
//! let template = Mesh::new(DMatrix::zeros(2, 3)).unwrap();
//! let mut components = DMatrix::zeros(6, 1);
//! components[(1, 0)] = 1.0;
//! let model = MorphableModel {
//!     template,
//!     components,
//!     kind: ModelKind::Au,
//!     explained_variance: vec![],
//! };
//!
//! let mesh = synthesize(&model, &DVector::from_element(1, 2.0)).unwrap();
//! assert_eq!(mesh.vertices[(0, 1)], 2.0); // vertex 0, y coordinate
//! assert_eq!(mesh.vertices[(1, 1)], 0.0); // vertex 1 untouched
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Deformation coefficients (alpha in `S = T + C*alpha`).
pub type AlphaVector = DVector<f64>;

/// Per-frame coefficient sequence for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSequence {
    pub frames: Vec<AlphaVector>,
}

impl AlphaSequence {
    pub fn k(&self) -> usize {
        self.frames.first().map(|a| a.len()).unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// A face mesh: N vertices, one row per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: DMatrix<f64>,
}

impl Mesh {
    pub fn new(vertices: DMatrix<f64>) -> Result<Self> {
        if vertices.ncols() != 3 {
            return Err(Error::Shape(format!(
                "mesh vertices must be Nx3, got {}x{}",
                vertices.nrows(),
                vertices.ncols()
            )));
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite vertex".into()));
        }
        Ok(Self { vertices })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.nrows()
    }

    /// Flattens vertex-major: rows 3v..3v+3 hold vertex v's x, y, z.
    pub fn flatten(&self) -> DVector<f64> {
        let n = self.n_vertices();
        let mut out = DVector::zeros(3 * n);
        for v in 0..n {
            for c in 0..3 {
                out[3 * v + c] = self.vertices[(v, c)];
            }
        }
        out
    }

    pub fn from_flat(flat: &DVector<f64>) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::Shape("flat vertex vector length not divisible by 3".into()));
        }
        let n = flat.len() / 3;
        let mut vertices = DMatrix::zeros(n, 3);
        for v in 0..n {
            for c in 0..3 {
                vertices[(v, c)] = flat[3 * v + c];
            }
        }
        Mesh::new(vertices)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// PCA over neutral scans; orthonormal components.
    Identity,
    /// Dictionary over expression offsets; unit-norm atoms.
    Au,
}

/// Template mesh plus deformation components.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    pub template: Mesh,
    /// 3N x K component matrix.
    pub components: DMatrix<f64>,
    pub kind: ModelKind,
    /// Explained variance per component (identity models only; empty for AU).
    pub explained_variance: Vec<f64>,
}

impl MorphableModel {
    pub fn n_vertices(&self) -> usize {
        self.template.n_vertices()
    }

    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }
}

/// AU deformation offsets (expressive minus neutral), with AU tags.
#[derive(Debug, Clone)]
pub struct OffsetSet {
    /// Each column-free entry is a flattened 3N offset.
    pub offsets: Vec<DVector<f64>>,
    pub labels: Vec<String>,
}

/// Synthesizes a mesh: `S = T + C*alpha` (Eq. fitting target).
pub fn synthesize(model: &MorphableModel, alpha: &AlphaVector) -> Result<Mesh> {
    if alpha.len() != model.n_components() {
        return Err(Error::InvalidArgument(format!(
            "alpha length {} != model K {}",
            alpha.len(),
            model.n_components()
        )));
    }
    let flat = model.template.flatten() + &model.components * alpha;
    Mesh::from_flat(&flat)
}

/// Builds the identity PCA model from neutral meshes.
///
/// Template is the mean mesh; components are the top-K principal directions
/// of the centered, flattened vertices, orthonormal and ordered by
/// non-increasing explained variance. Sign convention: the largest-magnitude
/// entry of each component is positive.
pub fn build_identity_model(neutral_meshes: &[Mesh], k: usize) -> Result<MorphableModel> {
    if neutral_meshes.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 meshes for PCA".into(),
        ));
    }
    let n = neutral_meshes[0].n_vertices();
    for m in neutral_meshes {
        if m.n_vertices() != n {
            return Err(Error::Topology(format!(
                "mesh has {} vertices, expected {}",
                m.n_vertices(),
                n
            )));
        }
    }
    if k > neutral_meshes.len() - 1 {
        return Err(Error::InvalidArgument(format!(
            "K={} exceeds mesh count - 1 = {}",
            k,
            neutral_meshes.len() - 1
        )));
    }
    let m = neutral_meshes.len();
    let dim = 3 * n;
    let flats: Vec<DVector<f64>> = neutral_meshes.iter().map(|x| x.flatten()).collect();
    let mut mean = DVector::zeros(dim);
    for f in &flats {
        mean += f;
    }
    mean /= m as f64;

    // data matrix: one centered sample per row
    let mut data = DMatrix::zeros(m, dim);
    for (i, f) in flats.iter().enumerate() {
        let c = f - &mean;
        data.row_mut(i).copy_from(&c.transpose());
    }
    // snapshot PCA: eigendecompose the small m x m Gram matrix and lift the
    // eigenvectors back through the data
    let gram = &data * data.transpose();
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let mut components = DMatrix::zeros(dim, k);
    let mut explained = Vec::with_capacity(k);
    for (j, &idx) in order.iter().take(k).enumerate() {
        let u: DVector<f64> = eig.eigenvectors.column(idx).clone_owned();
        let mut col = data.transpose() * u;
        let norm = col.norm();
        if norm < 1e-12 {
            return Err(Error::DegenerateData(format!(
                "requested K={k} exceeds the numerical rank of the training meshes"
            )));
        }
        col /= norm;
        // deterministic sign: largest-magnitude entry positive
        let lead = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if col[lead] < 0.0 {
            col = -col;
        }
        components.set_column(j, &col);
        explained.push(eig.eigenvalues[idx].max(0.0) / (m as f64 - 1.0));
    }

    Ok(MorphableModel {
        template: Mesh::from_flat(&mean)?,
        components,
        kind: ModelKind::Identity,
        explained_variance: explained,
    })
}

/// Computes flattened expressive-minus-neutral offsets per pair.
pub fn compute_au_offsets(pairs: &[(Mesh, Mesh, String)]) -> Result<OffsetSet> {
    let mut offsets = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for (expressive, neutral, label) in pairs {
        if expressive.n_vertices() != neutral.n_vertices() {
            return Err(Error::Topology(format!(
                "pair '{}': {} vs {} vertices",
                label,
                expressive.n_vertices(),
                neutral.n_vertices()
            )));
        }
        offsets.push(expressive.flatten() - neutral.flatten());
        labels.push(label.clone());
    }
    Ok(OffsetSet { offsets, labels })
}

/// Learns the AU dictionary model over offsets.
///
/// Alternates orthogonal matching pursuit (fixed sparsity) with a
/// method-of-optimal-directions dictionary update, renormalizing atoms each
/// round. Initialization is K normalized training offsets chosen by a seeded
/// shuffle; `iters = 0` returns the initialization. A sparse code is only
/// replaced when the new one does not increase the sample's residual, so the
/// reported per-round reconstruction error is non-increasing.
///
/// `base` is the zero-offset mesh the returned model deforms around.
pub fn learn_au_dictionary(
    offsets: &OffsetSet,
    base: &Mesh,
    k: usize,
    sparsity: usize,
    iters: usize,
    seed: u64,
) -> Result<(MorphableModel, Vec<f64>)> {
    if k < 1 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if sparsity > k {
        return Err(Error::InvalidArgument("sparsity must be <= K".into()));
    }
    if offsets.offsets.len() < k {
        return Err(Error::InvalidArgument(format!(
            "need at least K={} offsets, got {}",
            k,
            offsets.offsets.len()
        )));
    }
    let dim = offsets.offsets[0].len();
    if 3 * base.n_vertices() != dim {
        return Err(Error::Topology(format!(
            "base mesh dim {} != offset dim {}",
            3 * base.n_vertices(),
            dim
        )));
    }
    if offsets.offsets.iter().all(|o| o.norm() < 1e-14) {
        return Err(Error::DegenerateData("all offsets are zero".into()));
    }

    // init: K normalized training offsets by seeded shuffle, skipping
    // (near-)zero offsets
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..offsets.offsets.len()).collect();
    order.shuffle(&mut rng);
    let mut dict = DMatrix::zeros(dim, k);
    let mut filled = 0;
    // first pass: skip candidates nearly collinear with an already-chosen atom
    for pass in 0..2 {
        for &i in &order {
            if filled == k {
                break;
            }
            let o = &offsets.offsets[i];
            let norm = o.norm();
            if norm <= 1e-14 {
                continue;
            }
            let atom = o / norm;
            let duplicate = (0..filled).any(|j| dict.column(j).dot(&atom).abs() > 0.999);
            if pass == 0 && duplicate {
                continue;
            }
            if pass == 1 && duplicate {
                // no distinct candidates left; take a perturbed copy
                let mut col = atom.clone();
                col[filled % dim] += 1e-3;
                let n = col.norm();
                dict.set_column(filled, &(col / n));
                filled += 1;
                continue;
            }
            dict.set_column(filled, &atom);
            filled += 1;
        }
    }
    // not enough nonzero offsets: pad with normalized perturbations
    while filled < k {
        let src = dict.column(filled % filled.max(1)).clone_owned();
        let mut col = src;
        col[filled % dim] += 1e-3;
        let norm = col.norm();
        dict.set_column(filled, &(col / norm));
        filled += 1;
    }

    let m = offsets.offsets.len();
    let mut codes: Vec<DVector<f64>> = vec![DVector::zeros(k); m];
    let mut residuals: Vec<f64> = offsets.offsets.iter().map(|o| o.norm_squared()).collect();
    let mut history = Vec::with_capacity(iters);

    for _round in 0..iters {
        // sparse coding: keep the previous code when OMP does not improve
        for (i, x) in offsets.offsets.iter().enumerate() {
            let code = omp(&dict, x, sparsity);
            let res = (x - &dict * &code).norm_squared();
            if res <= residuals[i] {
                codes[i] = code;
                residuals[i] = res;
            }
        }
        history.push(residuals.iter().sum());

        // dictionary update: D = X A^T (A A^T + eps I)^-1, then renormalize
        // atoms and rescale codes so the representation is unchanged
        let mut a = DMatrix::zeros(k, m);
        let mut x = DMatrix::zeros(dim, m);
        for i in 0..m {
            a.set_column(i, &codes[i]);
            x.set_column(i, &offsets.offsets[i]);
        }
        let gram = &a * a.transpose() + DMatrix::identity(k, k) * 1e-10;
        if let Some(inv) = gram.try_inverse() {
            let candidate = &x * a.transpose() * inv;
            // only accept the update if it does not increase total error
            let new_total: f64 = (0..m)
                .map(|i| (offsets.offsets[i].clone() - &candidate * &codes[i]).norm_squared())
                .sum();
            let old_total: f64 = residuals.iter().sum();
            if new_total <= old_total + 1e-12 {
                dict = candidate;
                for i in 0..m {
                    residuals[i] =
                        (offsets.offsets[i].clone() - &dict * &codes[i]).norm_squared();
                }
            }
        }
        for j in 0..k {
            let norm = dict.column(j).norm();
            if norm > 1e-14 {
                let col = dict.column(j) / norm;
                dict.set_column(j, &col);
                for code in codes.iter_mut() {
                    code[j] *= norm;
                }
            }
        }
    }

    let model = MorphableModel {
        template: base.clone(),
        components: dict,
        kind: ModelKind::Au,
        explained_variance: Vec::new(),
    };
    Ok((model, history))
}

/// Orthogonal matching pursuit with fixed sparsity against unit-norm atoms.
fn omp(dict: &DMatrix<f64>, x: &DVector<f64>, sparsity: usize) -> DVector<f64> {
    let k = dict.ncols();
    let mut support: Vec<usize> = Vec::new();
    let mut residual = x.clone();
    let mut coeffs = DVector::zeros(0);
    for _ in 0..sparsity.min(k) {
        let mut best = None;
        let mut best_corr = 0.0;
        for j in 0..k {
            if support.contains(&j) {
                continue;
            }
            let corr = dict.column(j).dot(&residual).abs();
            if corr > best_corr {
                best_corr = corr;
                best = Some(j);
            }
        }
        let Some(j) = best else { break };
        if best_corr < 1e-14 {
            break;
        }
        support.push(j);
        // least squares on the support
        let mut sub = DMatrix::zeros(dict.nrows(), support.len());
        for (c, &idx) in support.iter().enumerate() {
            sub.set_column(c, &dict.column(idx).clone_owned());
        }
        let gram = sub.transpose() * &sub + DMatrix::identity(support.len(), support.len()) * 1e-12;
        let rhs = sub.transpose() * x;
        coeffs = gram
            .cholesky()
            .map(|c| c.solve(&rhs))
            .unwrap_or_else(|| DVector::zeros(support.len()));
        residual = x - &sub * &coeffs;
    }
    let mut code = DVector::zeros(k);
    for (c, &idx) in support.iter().enumerate() {
        code[idx] = coeffs[c];
    }
    code
}

/// Model restricted to landmark vertices: template rows (m x 3) and
/// component rows (3m x K), order preserved, duplicates allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkModel {
    /// Landmark template L_T, one row per landmark.
    pub template: DMatrix<f64>,
    /// Landmark-restricted components, 3m x K.
    pub components: DMatrix<f64>,
}

/// Selects template and component rows at the given vertex ids.
pub fn restrict_to_landmarks(
    model: &MorphableModel,
    landmark_vertex_ids: &[usize],
) -> Result<LandmarkModel> {
    let n = model.n_vertices();
    let k = model.n_components();
    let m = landmark_vertex_ids.len();
    let mut template = DMatrix::zeros(m, 3);
    let mut components = DMatrix::zeros(3 * m, k);
    for (i, &v) in landmark_vertex_ids.iter().enumerate() {
        if v >= n {
            return Err(Error::Bounds(format!(
                "landmark vertex id {v} out of range 0..{n}"
            )));
        }
        for c in 0..3 {
            template[(i, c)] = model.template.vertices[(v, c)];
            for j in 0..k {
                components[(3 * i + c, j)] = model.components[(3 * v + c, j)];
            }
        }
    }
    Ok(LandmarkModel {
        template,
        components,
    })
}

// ---------------------------------------------------------------------------
// file formats
// ---------------------------------------------------------------------------

const MODEL_MAGIC: &[u8; 4] = b"M3DM";

/// Writes a model: magic `M3DM`, u8 kind, u32 N, u32 K, template (3N f64),
/// components (3N*K f64, row-major), little-endian.
pub fn save_model(model: &MorphableModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&[match model.kind {
        ModelKind::Identity => 0u8,
        ModelKind::Au => 1u8,
    }])?;
    let n = model.n_vertices() as u32;
    let k = model.n_components() as u32;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&k.to_le_bytes())?;
    for v in model.template.flatten().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    for r in 0..model.components.nrows() {
        for c in 0..model.components.ncols() {
            w.write_all(&model.components[(r, c)].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MorphableModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, expected M3DM",
            path.display()
        )));
    }
    let mut kind_b = [0u8; 1];
    r.read_exact(&mut kind_b)?;
    let kind = match kind_b[0] {
        0 => ModelKind::Identity,
        1 => ModelKind::Au,
        other => return Err(Error::Format(format!("bad model kind byte {other}"))),
    };
    let n = read_u32(&mut r)? as usize;
    let k = read_u32(&mut r)? as usize;
    let mut flat = DVector::zeros(3 * n);
    for i in 0..3 * n {
        flat[i] = read_f64(&mut r)?;
    }
    let mut components = DMatrix::zeros(3 * n, k);
    for row in 0..3 * n {
        for col in 0..k {
            components[(row, col)] = read_f64(&mut r)?;
        }
    }
    Ok(MorphableModel {
        template: Mesh::from_flat(&flat)?,
        components,
        kind,
        explained_variance: Vec::new(),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Reads a mesh from OBJ (`v x y z` lines; faces ignored) or flat CSV
/// (`x,y,z` per line), chosen by extension.
pub fn load_mesh(path: &Path) -> Result<Mesh> {
    let is_obj = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.eq_ignore_ascii_case("obj"))
        .unwrap_or(false);
    let reader = BufReader::new(File::open(path)?);
    let mut rows: Vec<[f64; 3]> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let coords: Vec<&str> = if is_obj {
            if !trimmed.starts_with("v ") {
                continue;
            }
            trimmed[2..].split_whitespace().collect()
        } else {
            trimmed.split(',').map(|s| s.trim()).collect()
        };
        if coords.len() < 3 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: "expected 3 coordinates".into(),
            });
        }
        let mut v = [0.0; 3];
        for c in 0..3 {
            v[c] = coords[c].parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("bad coordinate '{}'", coords[c]),
            })?;
        }
        rows.push(v);
    }
    let mut vertices = DMatrix::zeros(rows.len(), 3);
    for (i, v) in rows.iter().enumerate() {
        for c in 0..3 {
            vertices[(i, c)] = v[c];
        }
    }
    Mesh::new(vertices)
}

pub fn save_mesh_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for i in 0..mesh.n_vertices() {
        writeln!(
            w,
            "v {} {} {}",
            mesh.vertices[(i, 0)],
            mesh.vertices[(i, 1)],
            mesh.vertices[(i, 2)]
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Reads landmark vertex ids: one integer per line.
pub fn load_landmark_ids(path: &Path) -> Result<Vec<usize>> {
    let reader = BufReader::new(File::open(path)?);
    let mut ids = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        ids.push(trimmed.parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: format!("bad vertex id '{trimmed}'"),
        })?);
    }
    Ok(ids)
}

pub fn save_landmark_ids(ids: &[usize], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for id in ids {
        writeln!(w, "{id}")?;
    }
    w.flush()?;
    Ok(())
}
