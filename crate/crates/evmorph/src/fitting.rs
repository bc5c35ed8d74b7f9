//! Landmark-based two-step 3DMM fitting.
//!
//! Step one estimates an orthographic camera from 68-point landmark
//! correspondences by pseudo-inverse, then solves a closed-form ridge
//! regression for the deformation coefficients. The identity model is fitted
//! once on the neutral first frame; the AU model is then fitted per frame
//! around the recovered identity shape, with the camera re-estimated per
//! frame so head movements are absorbed by the camera rather than the
//! coefficients.
//!
//! ```
//! use evmorph::fitting::{estimate_camera, project, CameraModel};
//! use nalgebra::{DMatrix, DVector};
//!
//! // Project 68 points through a known camera, then recover it exactly.
//! let points = DMatrix::from_fn(68, 3, |r, c| (r as f64 * (c as f64 + 1.0) * 0.37).sin());
//! let camera = CameraModel {
//!     a: DMatrix::from_row_slice(2, 3, &[1.2, 0.1, 0.0, -0.1, 1.2, 0.3]),
//!     t: DVector::from_column_slice(&[4.0, -2.0]),
//! };
//! let landmarks_2d = project(&camera, &points);
//!
//! let estimated = estimate_camera(&landmarks_2d, &points).unwrap();
//! assert!((estimated.a - camera.a).abs().max() < 1e-9);
//! assert!((estimated.t - camera.t).abs().max() < 1e-9);
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::face3d::{
    restrict_to_landmarks, synthesize, AlphaSequence, AlphaVector, LandmarkModel, Mesh,
    ModelKind, MorphableModel,
};

pub const NUM_LANDMARKS: usize = 68;

/// Detected 68-point landmarks with approximate z.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmarks3D {
    /// 68 x 3 points; columns are x, y, approximate z.
    pub points: DMatrix<f64>,
}

impl Landmarks3D {
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.nrows() != NUM_LANDMARKS || points.ncols() != 3 {
            return Err(Error::Shape(format!(
                "landmarks must be 68x3, got {}x{}",
                points.nrows(),
                points.ncols()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite landmark".into()));
        }
        Ok(Self { points })
    }

    /// The 2D part used as fitting targets.
    pub fn xy(&self) -> DMatrix<f64> {
        self.points.columns(0, 2).clone_owned()
    }
}

/// Orthographic camera: rotation, scale and shear in `A`, 2D translation `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    /// 2 x 3 camera matrix.
    pub a: DMatrix<f64>,
    /// 2-vector translation added to every projected point.
    pub t: DVector<f64>,
}

#[derive(Debug, Clone, Copy)]
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Ridge weight, in normalized landmark units.
    pub lambda_reg: f64,
    /// Camera/coefficient alternation count inside the high-level fits.
    pub refine_iters: usize,
    /// Normalize landmarks by inter-ocular distance before fitting.
    pub normalize: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 0.05,
            refine_iters: 5,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub alpha: AlphaVector,
    pub camera: CameraModel,
    /// Mean squared 2D reprojection error, per landmark, in squared pixels.
    pub residual: f64,
}

/// Estimates the orthographic camera from landmark correspondences.
///
/// Both point sets are centered; `A` is the least-squares map from the
/// centered template landmarks to the centered 2D targets (computed by
/// pseudo-inverse), and `t` is the row-mean of the remaining 2D residual,
/// which makes `(A, t)` the joint least-squares optimum of the affine fit.
pub fn estimate_camera(l2d: &DMatrix<f64>, template_landmarks: &DMatrix<f64>) -> Result<CameraModel> {
    let m = template_landmarks.nrows();
    if l2d.nrows() != m || l2d.ncols() != 2 || template_landmarks.ncols() != 3 {
        return Err(Error::Shape(format!(
            "camera estimation expects mx2 targets and mx3 template, got {}x{} and {}x{}",
            l2d.nrows(),
            l2d.ncols(),
            template_landmarks.nrows(),
            template_landmarks.ncols()
        )));
    }
    let mean_l = l2d.row_mean();
    let mean_t = template_landmarks.row_mean();
    let lc = DMatrix::from_fn(m, 2, |i, j| l2d[(i, j)] - mean_l[j]);
    let tc = DMatrix::from_fn(m, 3, |i, j| template_landmarks[(i, j)] - mean_t[j]);

    let svd = tc.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin < 1e-10 * smax.max(1e-300) {
        return Err(Error::Singular(
            "landmark template is rank-deficient after centering".into(),
        ));
    }
    // A^T = pinv(Tc) * Lc, solved via the SVD
    let a_t = svd
        .solve(&lc, 0.0)
        .map_err(|e| Error::Singular(e.to_string()))?;
    let a = a_t.transpose();

    // t = row-mean of (l2d - A * L_T)
    let projected = template_landmarks * &a_t;
    let resid = l2d - projected;
    let t_row = resid.row_mean();
    let t = DVector::from_vec(vec![t_row[0], t_row[1]]);
    Ok(CameraModel { a, t })
}

/// Applies the orthographic model: each 3D row `p` maps to `A*p + t`.
pub fn project(camera: &CameraModel, points: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = points * camera.a.transpose();
    for i in 0..out.nrows() {
        out[(i, 0)] += camera.t[0];
        out[(i, 1)] += camera.t[1];
    }
    out
}

/// Projects each 3D component column through the camera matrix (translation
/// cancels in the fitting residual). Input is a (3m x K) landmark-restricted
/// component matrix; output rows interleave landmarks as (x0, y0, x1, y1, ...).
pub fn project_components(components: &DMatrix<f64>, camera: &CameraModel) -> DMatrix<f64> {
    let m = components.nrows() / 3;
    let k = components.ncols();
    let mut out = DMatrix::zeros(2 * m, k);
    for j in 0..k {
        for i in 0..m {
            let px = components[(3 * i, j)];
            let py = components[(3 * i + 1, j)];
            let pz = components[(3 * i + 2, j)];
            out[(2 * i, j)] =
                camera.a[(0, 0)] * px + camera.a[(0, 1)] * py + camera.a[(0, 2)] * pz;
            out[(2 * i + 1, j)] =
                camera.a[(1, 0)] * px + camera.a[(1, 1)] * py + camera.a[(1, 2)] * pz;
        }
    }
    out
}

fn vec_residual(l2d: &DMatrix<f64>, projected_base: &DMatrix<f64>) -> DVector<f64> {
    let m = l2d.nrows();
    let mut out = DVector::zeros(2 * m);
    for i in 0..m {
        out[2 * i] = l2d[(i, 0)] - projected_base[(i, 0)];
        out[2 * i + 1] = l2d[(i, 1)] - projected_base[(i, 1)];
    }
    out
}

/// Closed-form ridge regression for the deformation coefficients:
/// `alpha = argmin ||dl - P*alpha||^2 + lambda*||alpha||^2`.
pub fn fit_coefficients(
    l2d: &DMatrix<f64>,
    base_landmarks: &DMatrix<f64>,
    projected_components: &DMatrix<f64>,
    camera: &CameraModel,
    config: &FitConfig,
) -> Result<FitResult> {
    let k = projected_components.ncols();
    if k < 1 {
        return Err(Error::InvalidArgument("need at least one component".into()));
    }
    if config.lambda_reg < 0.0 {
        return Err(Error::InvalidArgument("lambda_reg must be >= 0".into()));
    }
    let m = l2d.nrows();
    if projected_components.nrows() != 2 * m || base_landmarks.nrows() != m {
        return Err(Error::Shape(
            "landmark / component row counts disagree".into(),
        ));
    }
    let dl = vec_residual(l2d, &project(camera, base_landmarks));
    let p = projected_components;
    let normal = p.transpose() * p + DMatrix::identity(k, k) * config.lambda_reg;
    let rhs = p.transpose() * &dl;
    let alpha = match normal.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => {
            if config.lambda_reg == 0.0 {
                return Err(Error::Singular(
                    "P^T P is singular and lambda_reg is 0".into(),
                ));
            }
            normal
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Singular("normal equations unsolvable".into()))?
        }
    };
    let resid = &dl - p * &alpha;
    let residual = resid.norm_squared() / m as f64;
    Ok(FitResult {
        alpha,
        camera: camera.clone(),
        residual,
    })
}

/// Inter-ocular distance of a 68-point landmark set: distance between the
/// mean of the left-eye points (36..41) and the right-eye points (42..47).
pub fn inter_ocular_distance(l2d: &DMatrix<f64>) -> Result<f64> {
    let mean_of = |range: std::ops::Range<usize>| {
        let mut x = 0.0;
        let mut y = 0.0;
        let n = range.len() as f64;
        for i in range {
            x += l2d[(i, 0)];
            y += l2d[(i, 1)];
        }
        (x / n, y / n)
    };
    let (lx, ly) = mean_of(36..42);
    let (rx, ry) = mean_of(42..48);
    let d = ((lx - rx).powi(2) + (ly - ry).powi(2)).sqrt();
    if d < 1e-12 {
        return Err(Error::Singular("zero inter-ocular distance".into()));
    }
    Ok(d)
}

struct PreparedTargets {
    l2d: DMatrix<f64>,
    scale: f64,
}

fn prepare_targets(landmarks: &Landmarks3D, config: &FitConfig) -> Result<PreparedTargets> {
    let l2d = landmarks.xy();
    let scale = if config.normalize {
        inter_ocular_distance(&l2d)?
    } else {
        1.0
    };
    Ok(PreparedTargets {
        l2d: l2d / scale,
        scale,
    })
}

/// One camera + ridge solve, alternated: the camera is re-estimated against
/// the currently synthesized landmark shape so that on noiseless data the
/// pair converges to the exact generating camera and coefficients.
fn fit_single_frame(
    l2d: &DMatrix<f64>,
    landmark_model: &LandmarkModel,
    config: &FitConfig,
) -> Result<FitResult> {
    let base = &landmark_model.template;
    let mut camera = estimate_camera(l2d, base)?;
    let mut result = {
        let p = project_components(&landmark_model.components, &camera);
        fit_coefficients(l2d, base, &p, &camera, config)?
    };
    for _ in 0..config.refine_iters {
        // current landmark shape under alpha
        let m = base.nrows();
        let mut shaped = base.clone();
        let offset = &landmark_model.components * &result.alpha;
        for i in 0..m {
            for c in 0..3 {
                shaped[(i, c)] += offset[3 * i + c];
            }
        }
        camera = estimate_camera(l2d, &shaped)?;
        let p = project_components(&landmark_model.components, &camera);
        result = fit_coefficients(l2d, base, &p, &camera, config)?;
    }
    Ok(result)
}

/// Fits the identity model on the (assumed neutral) first frame and returns
/// the identity coefficients, the full identity shape and the camera.
pub fn fit_identity(
    first_frame_landmarks: &Landmarks3D,
    id_model: &MorphableModel,
    landmark_ids: &[usize],
    config: &FitConfig,
) -> Result<(AlphaVector, Mesh, CameraModel)> {
    if id_model.kind != ModelKind::Identity {
        return Err(Error::InvalidArgument(
            "fit_identity expects an identity-kind model".into(),
        ));
    }
    let lm = restrict_to_landmarks(id_model, landmark_ids)?;
    let prepared = prepare_targets(first_frame_landmarks, config)?;
    let result = fit_single_frame(&prepared.l2d, &lm, config)?;
    let shape = synthesize(id_model, &result.alpha)?;
    // report the camera in original pixel units
    let camera = CameraModel {
        a: &result.camera.a * prepared.scale,
        t: &result.camera.t * prepared.scale,
    };
    Ok((result.alpha, shape, camera))
}

/// Fits the AU model per frame around the identity shape `S_I`; the camera
/// is re-estimated independently for every frame.
pub fn fit_au_sequence(
    landmark_seq: &[Landmarks3D],
    identity_shape: &Mesh,
    au_model: &MorphableModel,
    landmark_ids: &[usize],
    config: &FitConfig,
) -> Result<AlphaSequence> {
    if au_model.kind != ModelKind::Au {
        return Err(Error::InvalidArgument(
            "fit_au_sequence expects an AU-kind model".into(),
        ));
    }
    if landmark_seq.is_empty() {
        return Err(Error::InvalidArgument("empty landmark sequence".into()));
    }
    if identity_shape.n_vertices() != au_model.n_vertices() {
        return Err(Error::Topology(format!(
            "identity shape has {} vertices, AU model {}",
            identity_shape.n_vertices(),
            au_model.n_vertices()
        )));
    }
    // AU model deforms around S_I instead of the template
    let shifted = MorphableModel {
        template: identity_shape.clone(),
        components: au_model.components.clone(),
        kind: ModelKind::Au,
        explained_variance: Vec::new(),
    };
    let lm = restrict_to_landmarks(&shifted, landmark_ids)?;

    let frames: Result<Vec<AlphaVector>> = landmark_seq
        .par_iter()
        .map(|landmarks| {
            let prepared = prepare_targets(landmarks, config)?;
            let result = fit_single_frame(&prepared.l2d, &lm, config)?;
            Ok(result.alpha)
        })
        .collect();
    Ok(AlphaSequence { frames: frames? })
}

// ---------------------------------------------------------------------------
// file formats
// ---------------------------------------------------------------------------

/// Reads a per-video landmark file: one line per frame, 68*3 comma-separated
/// floats; frame 0 is the identity frame.
pub fn load_landmark_sequence(path: &Path) -> Result<Vec<Landmarks3D>> {
    let reader = BufReader::new(File::open(path)?);
    let mut frames = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let values: Vec<f64> = trimmed
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
        if values.len() != NUM_LANDMARKS * 3 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("expected {} floats, got {}", NUM_LANDMARKS * 3, values.len()),
            });
        }
        let points = DMatrix::from_fn(NUM_LANDMARKS, 3, |i, j| values[3 * i + j]);
        frames.push(Landmarks3D::new(points)?);
    }
    Ok(frames)
}

pub fn save_landmark_sequence(frames: &[Landmarks3D], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for f in frames {
        let mut fields = Vec::with_capacity(NUM_LANDMARKS * 3);
        for i in 0..NUM_LANDMARKS {
            for j in 0..3 {
                fields.push(format!("{}", f.points[(i, j)]));
            }
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a per-video alpha file: one line per frame, K comma-separated floats.
pub fn load_alpha_sequence(path: &Path) -> Result<AlphaSequence> {
    let reader = BufReader::new(File::open(path)?);
    let mut frames = Vec::new();
    let mut k: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let values: Vec<f64> = trimmed
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
        if let Some(k) = k {
            if values.len() != k {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: idx + 1,
                    msg: format!("expected {} floats, got {}", k, values.len()),
                });
            }
        } else {
            k = Some(values.len());
        }
        frames.push(DVector::from_vec(values));
    }
    Ok(AlphaSequence { frames })
}

pub fn save_alpha_sequence(seq: &AlphaSequence, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for a in &seq.frames {
        let fields: Vec<String> = a.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}
