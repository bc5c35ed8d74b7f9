//! Synthetic-data generators with known ground truth: planted coefficient
//! trajectories, landmark sequences rendered through a known camera, and
//! event streams derived from landmark motion. Every pipeline stage can be
//! checked against the planted values.
//!
//! ```
//! use evmorph::synth::gen_alpha_trajectory;
//!
//! // Class 2 of 4: only component 2 activates, rising then falling.
//! let traj = gen_alpha_trajectory(2, 10, 4, 7).unwrap();
//! assert_eq!(traj.frames.len(), 10);
//! assert!(traj.frames[0][2] < traj.frames[5][2]); // onset rises toward the apex
//! assert!(traj.frames[5][2] > 1.0); // peaks mid-sequence
//! assert!(traj.frames.iter().all(|a| a[0] == 0.0 && a[1] == 0.0 && a[3] == 0.0));
//! ```

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::event::{
    aggregate_periodic, encode_events, render_frame, Event, EventFormat, EventStream, Image,
    Polarity, DEFAULT_DELTA_T,
};
use crate::face3d::{synthesize, AlphaSequence, Mesh, ModelKind, MorphableModel};
use crate::fitting::{save_alpha_sequence, save_landmark_sequence, CameraModel, Landmarks3D, NUM_LANDMARKS};
use crate::training::{save_training_manifest, ManifestEntry, Split, VideoSample};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_videos_per_class: usize,
    pub seq_len: usize,
    /// Number of deformation components (and maximum class count).
    pub k: usize,
    /// Mesh vertex count; the first 68 vertices are the landmarks.
    pub mesh_size: usize,
    /// Landmark noise in pixels.
    pub noise_sigma: f64,
    /// Square event sensor side length.
    pub sensor_size: usize,
    /// Events per moved landmark and polarity in each frame transition.
    pub events_per_frame: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            n_videos_per_class: 25,
            seq_len: 12,
            k: 8,
            mesh_size: 100,
            noise_sigma: 0.0,
            sensor_size: 32,
            events_per_frame: 6,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_classes == 0
            || self.n_videos_per_class == 0
            || self.seq_len == 0
            || self.k == 0
            || self.mesh_size == 0
            || self.sensor_size == 0
            || self.events_per_frame == 0
        {
            problems.push("all counts must be >= 1".to_string());
        }
        if self.noise_sigma < 0.0 {
            problems.push("noise_sigma must be >= 0".to_string());
        }
        if self.n_classes > self.k {
            problems.push(format!(
                "n_classes {} exceeds component count {}",
                self.n_classes, self.k
            ));
        }
        if self.mesh_size < NUM_LANDMARKS {
            problems.push(format!(
                "mesh_size {} below the {NUM_LANDMARKS} landmark vertices",
                self.mesh_size
            ));
        }
        if self.k > NUM_LANDMARKS {
            problems.push(format!("k {} exceeds {NUM_LANDMARKS} landmarks", self.k));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }
}

/// Planted generating values for one synthetic video.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub trajectory: AlphaSequence,
    pub camera: CameraModel,
    pub landmarks: Vec<Landmarks3D>,
    pub events: EventStream,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub samples: Vec<VideoSample>,
    pub ground_truth: Vec<GroundTruth>,
    pub split: Vec<Split>,
    pub model: MorphableModel,
    pub landmark_ids: Vec<usize>,
    pub camera: CameraModel,
}

// ---------------------------------------------------------------------------
// synthetic morphable models
// ---------------------------------------------------------------------------

/// Random smooth mesh: landmark vertices arranged in class-group clusters on
/// a circle, remaining vertices scattered; z varies so camera estimation is
/// well-posed.
fn synthetic_template(n_vertices: usize, k: usize, rng: &mut ChaCha8Rng) -> Mesh {
    let mut v = DMatrix::zeros(n_vertices, 3);
    let group_size = NUM_LANDMARKS / k;
    for i in 0..n_vertices {
        if i < NUM_LANDMARKS {
            let group = (i / group_size.max(1)).min(k - 1);
            let theta = 2.0 * std::f64::consts::PI * group as f64 / k as f64;
            let within = (i % group_size.max(1)) as f64;
            let jitter = 0.12 * within / group_size.max(1) as f64;
            let r = 0.55 + jitter;
            v[(i, 0)] = r * theta.cos() + rng.gen_range(-0.03..0.03);
            v[(i, 1)] = r * theta.sin() + rng.gen_range(-0.03..0.03);
            v[(i, 2)] = 0.3 * (i as f64 * 0.7).sin();
        } else {
            v[(i, 0)] = rng.gen_range(-1.0..1.0);
            v[(i, 1)] = rng.gen_range(-1.0..1.0);
            v[(i, 2)] = rng.gen_range(-0.3..0.3);
        }
    }
    Mesh::new(v).unwrap()
}

/// Deformation model whose component `j` moves only the `j`-th landmark
/// group, radially in the image plane. Disjoint groups make the columns
/// orthonormal and the class motions spatially separable on the sensor.
pub fn grouped_au_model(n_vertices: usize, k: usize, seed: u64) -> Result<MorphableModel> {
    if n_vertices < NUM_LANDMARKS || k == 0 || k > NUM_LANDMARKS {
        return Err(Error::InvalidArgument(format!(
            "need >= {NUM_LANDMARKS} vertices and 1..={NUM_LANDMARKS} components, got {n_vertices}/{k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = synthetic_template(n_vertices, k, &mut rng);
    let group_size = NUM_LANDMARKS / k;
    let mut components = DMatrix::zeros(3 * n_vertices, k);
    for j in 0..k {
        let start = j * group_size.max(1);
        let end = if j == k - 1 {
            NUM_LANDMARKS
        } else {
            (start + group_size.max(1)).min(NUM_LANDMARKS)
        };
        for i in start..end {
            // radial direction, alternating sign within the group: the
            // motion is zero-mean and far from affine, so the camera
            // estimate cannot absorb it
            let x = template.vertices[(i, 0)];
            let y = template.vertices[(i, 1)];
            let norm = (x * x + y * y).sqrt().max(1e-9);
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            components[(3 * i, j)] = sign * x / norm;
            components[(3 * i + 1, j)] = sign * y / norm;
        }
        let col_norm = components.column(j).norm();
        if col_norm > 0.0 {
            let mut col = components.column_mut(j);
            col /= col_norm;
        }
    }
    Ok(MorphableModel {
        template,
        components,
        kind: ModelKind::Au,
        explained_variance: Vec::new(),
    })
}

/// Random orthonormal-component model of either kind (QR of a seeded random
/// matrix); useful wherever structure does not matter.
pub fn random_morphable_model(
    n_vertices: usize,
    k: usize,
    kind: ModelKind,
    seed: u64,
) -> Result<MorphableModel> {
    if k > 3 * n_vertices {
        return Err(Error::InvalidArgument(format!(
            "k {k} exceeds 3N = {}",
            3 * n_vertices
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = synthetic_template(n_vertices, k.min(NUM_LANDMARKS).max(1), &mut rng);
    let raw = DMatrix::from_fn(3 * n_vertices, k, |_, _| rng.gen_range(-1.0..1.0));
    let qr = raw.qr();
    let components = qr.q().columns(0, k).into_owned();
    Ok(MorphableModel {
        template,
        components,
        kind,
        explained_variance: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// generators
// ---------------------------------------------------------------------------

/// Seeded peak amplitude of a class trajectory.
fn peak_amplitude(class_id: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(class_id as u64 * 0x9e37));
    2.2 + rng.gen_range(0.0..0.8)
}

/// Onset-apex-offset activation profile at frame `t` of `len`, in [0, 1]:
/// `sin^2(pi (t+1) / (len+1))`. Strictly positive at every frame, apex at
/// the sequence midpoint.
pub fn activation_profile(t: usize, len: usize) -> f64 {
    let phase = std::f64::consts::PI * (t as f64 + 1.0) / (len as f64 + 1.0);
    phase.sin().powi(2)
}

/// Smooth activation of only component `class_id`: the onset-apex-offset
/// profile scaled by a seeded amplitude; all other components stay zero.
pub fn gen_alpha_trajectory(
    class_id: usize,
    seq_len: usize,
    k: usize,
    seed: u64,
) -> Result<AlphaSequence> {
    if class_id >= k {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} has no dedicated component (k = {k})"
        )));
    }
    if seq_len == 0 {
        return Err(Error::InvalidArgument("seq_len must be >= 1".into()));
    }
    let amp = peak_amplitude(class_id, seed);
    let frames = (0..seq_len)
        .map(|t| {
            let mut alpha = DVector::zeros(k);
            alpha[class_id] = amp * activation_profile(t, seq_len);
            alpha
        })
        .collect();
    Ok(AlphaSequence { frames })
}

/// Renders one landmark frame: synthesize the mesh, keep the landmark
/// vertices, project x/y through the camera, take z from the 3D landmark.
fn render_landmark_frame(
    alpha: &DVector<f64>,
    model: &MorphableModel,
    landmark_ids: &[usize],
    camera: &CameraModel,
    noise: Option<(&Normal<f64>, &mut ChaCha8Rng)>,
) -> Result<Landmarks3D> {
    let mesh = synthesize(model, alpha)?;
    let mut points = DMatrix::zeros(landmark_ids.len(), 3);
    for (row, &id) in landmark_ids.iter().enumerate() {
        if id >= mesh.n_vertices() {
            return Err(Error::Bounds(format!("landmark vertex {id} out of range")));
        }
        let p = mesh.vertices.row(id).transpose();
        let xy = &camera.a * &p + &camera.t;
        points[(row, 0)] = xy[0];
        points[(row, 1)] = xy[1];
        points[(row, 2)] = p[2];
    }
    if let Some((normal, rng)) = noise {
        for row in 0..points.nrows() {
            points[(row, 0)] += normal.sample(rng);
            points[(row, 1)] += normal.sample(rng);
        }
    }
    Landmarks3D::new(points)
}

/// Renders the full trajectory; noise is seeded Gaussian on x/y only.
pub fn render_synthetic_landmarks(
    traj: &AlphaSequence,
    model: &MorphableModel,
    landmark_ids: &[usize],
    camera: &CameraModel,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<Landmarks3D>> {
    if noise_sigma < 0.0 {
        return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    traj.frames
        .iter()
        .map(|alpha| {
            let noise = if noise_sigma > 0.0 {
                Some((&normal, &mut rng))
            } else {
                None
            };
            render_landmark_frame(alpha, model, landmark_ids, camera, noise)
        })
        .collect()
}

fn clamp_pixel(v: f64, max: u16, clipped: &mut usize) -> u16 {
    let rounded = v.round();
    if rounded < 0.0 {
        *clipped += 1;
        0
    } else if rounded > (max - 1) as f64 {
        *clipped += 1;
        max - 1
    } else {
        rounded as u16
    }
}

/// Emits events from landmark motion: for each consecutive frame pair and
/// each landmark whose pixel moved, `events_per_frame` OFF events at the
/// departure pixel and `events_per_frame` ON events at the arrival pixel.
/// The transition between landmark frames `k` and `k+1` lands inside the
/// aggregation window of frame `k+1`; timestamps are spread over disjoint
/// slots of that window with seeded jitter, so the stream is sorted.
/// Returns the stream and the number of clipped out-of-bounds coordinates.
pub fn gen_synthetic_events(
    landmark_seq: &[Landmarks3D],
    width: u16,
    height: u16,
    events_per_frame: usize,
    seed: u64,
) -> Result<(EventStream, usize)> {
    if width == 0 || height == 0 || events_per_frame == 0 {
        return Err(Error::InvalidArgument(
            "sensor size and events_per_frame must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clipped = 0usize;
    let pixels: Vec<Vec<(u16, u16)>> = landmark_seq
        .iter()
        .map(|lm| {
            (0..lm.points.nrows())
                .map(|i| {
                    (
                        clamp_pixel(lm.points[(i, 0)], width, &mut clipped),
                        clamp_pixel(lm.points[(i, 1)], height, &mut clipped),
                    )
                })
                .collect()
        })
        .collect();
    let mut events = Vec::new();
    for t in 1..pixels.len() {
        // (departure, arrival) per moved landmark
        let mut moves = Vec::new();
        for i in 0..pixels[t].len() {
            if pixels[t][i] != pixels[t - 1][i] {
                moves.push((pixels[t - 1][i], pixels[t][i]));
            }
        }
        if moves.is_empty() {
            continue;
        }
        let window_start = t as u64 * DEFAULT_DELTA_T;
        let total = moves.len() * events_per_frame * 2;
        let slot = DEFAULT_DELTA_T / total as u64;
        let mut emitted = 0u64;
        for (from, to) in moves {
            for _ in 0..events_per_frame {
                for (pix, p) in [(from, Polarity::Off), (to, Polarity::On)] {
                    let jitter = if slot > 1 { rng.gen_range(0..slot) } else { 0 };
                    events.push(Event {
                        t: window_start + emitted * slot.max(1) + jitter.min(slot.saturating_sub(1)),
                        x: pix.0,
                        y: pix.1,
                        p,
                    });
                    emitted += 1;
                }
            }
        }
    }
    let stream = EventStream::new(width, height, events)?;
    Ok((stream, clipped))
}

// ---------------------------------------------------------------------------
// dataset assembly
// ---------------------------------------------------------------------------

/// The camera used for all synthetic videos of a dataset: uniform scale that
/// maps the unit-circle template into the sensor with a margin.
pub fn synthetic_camera(sensor_size: usize) -> CameraModel {
    let s = sensor_size as f64 * 0.28;
    let c = sensor_size as f64 / 2.0;
    CameraModel {
        a: DMatrix::from_row_slice(2, 3, &[s, 0.0, 0.0, 0.0, s, 0.0]),
        t: DVector::from_vec(vec![c, c]),
    }
}

fn video_seed(spec_seed: u64, class: usize, video: usize) -> u64 {
    spec_seed
        .wrapping_mul(0x100000001b3)
        .wrapping_add((class as u64) << 32)
        .wrapping_add(video as u64)
}

/// Generates the full dataset: planted trajectories, rendered landmarks,
/// event streams, aggregated event frames, and an 80-20 train/test split
/// per class. Bitwise-reproducible under the spec seed.
pub fn make_dataset(spec: &SynthSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let model = grouped_au_model(spec.mesh_size, spec.k, spec.seed)?;
    let landmark_ids: Vec<usize> = (0..NUM_LANDMARKS).collect();
    let camera = synthetic_camera(spec.sensor_size);
    let sensor = spec.sensor_size as u16;
    let n_train = (spec.n_videos_per_class * 4) / 5;

    let mut samples = Vec::new();
    let mut ground_truth = Vec::new();
    let mut split = Vec::new();
    for class in 0..spec.n_classes {
        for video in 0..spec.n_videos_per_class {
            let seed = video_seed(spec.seed, class, video);
            let traj = gen_alpha_trajectory(class, spec.seq_len, spec.k, seed)?;
            let landmarks = render_synthetic_landmarks(
                &traj,
                &model,
                &landmark_ids,
                &camera,
                spec.noise_sigma,
                seed.wrapping_add(1),
            )?;
            let (events, _clipped) = gen_synthetic_events(
                &landmarks,
                sensor,
                sensor,
                spec.events_per_frame,
                seed.wrapping_add(2),
            )?;
            let frames: Vec<Image> = aggregate_periodic(&events, DEFAULT_DELTA_T)?
                .iter()
                .map(render_frame)
                .collect();
            if frames.is_empty() {
                return Err(Error::DegenerateData(format!(
                    "class {class} video {video} produced no events"
                )));
            }
            let len = frames.len().min(spec.seq_len);
            let frames = frames[..len].to_vec();
            let mut targets = Mat::zeros(len, spec.k);
            for t in 0..len {
                targets.row_mut(t).copy_from(&traj.frames[t].transpose());
            }
            samples.push(VideoSample::new(frames, targets, class, len)?);
            ground_truth.push(GroundTruth {
                trajectory: traj,
                camera: camera.clone(),
                landmarks,
                events,
            });
            split.push(if video < n_train {
                Split::Train
            } else {
                Split::Test
            });
        }
    }
    Ok(SyntheticDataset {
        samples,
        ground_truth,
        split,
        model,
        landmark_ids,
        camera,
    })
}

/// Writes the dataset in the same formats the real pipeline consumes:
/// per-video event files, landmark files, coefficient files, and a training
/// manifest. Returns the manifest path.
pub fn write_dataset(dataset: &SyntheticDataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, (sample, gt)) in dataset
        .samples
        .iter()
        .zip(&dataset.ground_truth)
        .enumerate()
    {
        let video_id = format!("c{}_v{i:04}", sample.class_label);
        let events_path = dir.join(format!("{video_id}.evbin"));
        let alpha_path = dir.join(format!("{video_id}.alpha.csv"));
        let landmarks_path = dir.join(format!("{video_id}.landmarks.csv"));
        encode_events(&gt.events, &events_path, EventFormat::Evbin)?;
        save_alpha_sequence(&gt.trajectory, &alpha_path)?;
        save_landmark_sequence(&gt.landmarks, &landmarks_path)?;
        entries.push(ManifestEntry {
            video_id,
            frames_path: events_path,
            alpha_path,
            class_label: sample.class_label,
            split: dataset.split[i],
        });
    }
    let manifest = dir.join("manifest.csv");
    save_training_manifest(&entries, &manifest)?;
    Ok(manifest)
}
