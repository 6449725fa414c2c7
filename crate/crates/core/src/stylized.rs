//! A procedurally built, license-free hand with the same schema as the
//! full parametric model: a tubular palm plus five three-segment fingers,
//! exactly 778 vertices, 16 skeleton joints and smooth skinning.
//!
//! Canonical pose: wrist at the origin, fingers along -y, palm normal
//! along -z (facing a camera looking down +z), units in meters.

use crate::hand_model::{HandModel, NUM_JOINTS, NUM_POSE, NUM_SHAPE, NUM_SKELETON_JOINTS, NUM_VERTICES};
use crate::math::{self, Vec3};

const PALM_RING: usize = 18;
const PALM_RINGS: usize = 9;
const PALM_LENGTH: f64 = 0.09;
const FINGER_RING: usize = 8;
/// Fingers start this far inside the palm so the tubes overlap.
const FINGER_ROOT_INSET: f64 = 0.006;
/// Half-width of the skinning blend around each finger joint.
const SKIN_BLEND: f64 = 0.005;

struct FingerSpec {
    /// Skeleton indices of MCP, PIP, DIP.
    joints: [usize; 3],
    base: Vec3,
    direction: Vec3,
    lengths: [f64; 3],
    radius: (f64, f64),
    rings: usize,
}

/// Skeleton parents: index 1-3, middle 4-6, pinky 7-9, ring 10-12, thumb 13-15.
pub const STYLIZED_PARENTS: [i64; NUM_SKELETON_JOINTS] =
    [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14];

fn fingers() -> [FingerSpec; 5] {
    let thumb_dir = {
        let d = [0.6, -0.8, 0.0];
        math::scale(d, 1.0 / math::norm(d))
    };
    [
        FingerSpec {
            joints: [13, 14, 15],
            base: [0.034, -0.025, 0.0],
            direction: thumb_dir,
            lengths: [0.040, 0.030, 0.025],
            radius: (0.011, 0.008),
            rings: 13,
        },
        FingerSpec {
            joints: [1, 2, 3],
            base: [0.026, -PALM_LENGTH, 0.0],
            direction: [0.0, -1.0, 0.0],
            lengths: [0.040, 0.025, 0.020],
            radius: (0.0085, 0.007),
            rings: 16,
        },
        FingerSpec {
            joints: [4, 5, 6],
            base: [0.009, -PALM_LENGTH - 0.002, 0.0],
            direction: [0.0, -1.0, 0.0],
            lengths: [0.045, 0.028, 0.021],
            radius: (0.009, 0.0075),
            rings: 16,
        },
        FingerSpec {
            joints: [10, 11, 12],
            base: [-0.009, -PALM_LENGTH, 0.0],
            direction: [0.0, -1.0, 0.0],
            lengths: [0.042, 0.026, 0.020],
            radius: (0.0085, 0.007),
            rings: 16,
        },
        FingerSpec {
            joints: [7, 8, 9],
            base: [-0.026, -PALM_LENGTH + 0.005, 0.0],
            direction: [0.0, -1.0, 0.0],
            lengths: [0.032, 0.020, 0.018],
            radius: (0.0075, 0.006),
            rings: 16,
        },
    ]
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn tube_faces(faces: &mut Vec<[u32; 3]>, first: usize, ring: usize, rings: usize) {
    for k in 0..rings - 1 {
        for i in 0..ring {
            let a = (first + k * ring + i) as u32;
            let b = (first + k * ring + (i + 1) % ring) as u32;
            let c = (first + (k + 1) * ring + i) as u32;
            let d = (first + (k + 1) * ring + (i + 1) % ring) as u32;
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
}

fn fan_faces(faces: &mut Vec<[u32; 3]>, first: usize, ring: usize) {
    for i in 1..ring - 1 {
        faces.push([first as u32, (first + i) as u32, (first + i + 1) as u32]);
    }
}

/// Weights that place the centroid of two adjacent rings at axis position `s`.
fn ring_interpolation_row(first: usize, ring: usize, stations: &[f64], s: f64) -> Vec<f64> {
    let mut row = vec![0.0; NUM_VERTICES];
    let k = stations
        .windows(2)
        .position(|w| s >= w[0] && s <= w[1])
        .unwrap_or(stations.len() - 2);
    let alpha = ((s - stations[k]) / (stations[k + 1] - stations[k])).clamp(0.0, 1.0);
    for i in 0..ring {
        row[first + k * ring + i] += (1.0 - alpha) / ring as f64;
        row[first + (k + 1) * ring + i] += alpha / ring as f64;
    }
    row
}

/// Builds the stylized hand with `n_pc` pose components (identity PCA basis
/// over the 45 articulation axes). Deterministic.
pub fn make_stylized_hand(n_pc: usize) -> HandModel {
    let mut template: Vec<Vec3> = Vec::with_capacity(NUM_VERTICES);
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut shape: Vec<[[f64; NUM_SHAPE]; 3]> = Vec::with_capacity(NUM_VERTICES);
    let mut skin: Vec<[f64; NUM_SKELETON_JOINTS]> = Vec::with_capacity(NUM_VERTICES);
    let mut rest_rows: Vec<Vec<f64>> = vec![vec![0.0; NUM_VERTICES]; NUM_SKELETON_JOINTS];
    let mut tip_rows: Vec<Vec<f64>> = vec![Vec::new(); 5];

    // Palm: elliptical tube widening from wrist to knuckles.
    for k in 0..PALM_RINGS {
        let t = k as f64 / (PALM_RINGS - 1) as f64;
        let y = -PALM_LENGTH * t;
        let half_width = 0.030 + 0.012 * t;
        let half_thickness = 0.012;
        for i in 0..PALM_RING {
            let phi = 2.0 * std::f64::consts::PI * i as f64 / PALM_RING as f64;
            let v = [half_width * phi.cos(), y, half_thickness * phi.sin()];
            template.push(v);
            let mut basis = [[0.0; NUM_SHAPE]; 3];
            for c in 0..3 {
                basis[c][0] = 0.08 * v[c];
            }
            basis[0][2] = 0.1 * v[0];
            basis[2][3] = 0.15 * v[2];
            basis[1][9] = 0.1 * v[1];
            shape.push(basis);
            let mut w = [0.0; NUM_SKELETON_JOINTS];
            w[0] = 1.0;
            skin.push(w);
        }
    }
    tube_faces(&mut faces, 0, PALM_RING, PALM_RINGS);
    fan_faces(&mut faces, 0, PALM_RING);
    fan_faces(&mut faces, (PALM_RINGS - 1) * PALM_RING, PALM_RING);
    for i in 0..PALM_RING {
        rest_rows[0][i] = 1.0 / PALM_RING as f64;
    }
    let palm_vertices: Vec<Vec3> = template.clone();

    for (f_idx, finger) in fingers().iter().enumerate() {
        let first = template.len();
        let d = finger.direction;
        let side = [-d[1], d[0], 0.0];
        let up = [0.0, 0.0, 1.0];
        let total: f64 = finger.lengths.iter().sum();
        let s0 = -FINGER_ROOT_INSET;
        let stations: Vec<f64> = (0..finger.rings)
            .map(|k| s0 + (total - s0) * k as f64 / (finger.rings - 1) as f64)
            .collect();
        let bounds = [0.0, finger.lengths[0], finger.lengths[0] + finger.lengths[1]];
        for (k, &s) in stations.iter().enumerate() {
            let t = (s - s0) / (total - s0);
            let mut r = finger.radius.0 + (finger.radius.1 - finger.radius.0) * t;
            if k == finger.rings - 1 {
                r *= 0.6;
            }
            let center = math::add(finger.base, math::scale(d, s));
            let h: Vec<f64> = bounds
                .iter()
                .map(|b| smoothstep((s - b + SKIN_BLEND) / (2.0 * SKIN_BLEND)))
                .collect();
            let mut w = [0.0; NUM_SKELETON_JOINTS];
            w[0] = 1.0 - h[0];
            w[finger.joints[0]] = h[0] - h[1];
            w[finger.joints[1]] = h[1] - h[2];
            w[finger.joints[2]] = h[2];
            for i in 0..FINGER_RING {
                let phi = 2.0 * std::f64::consts::PI * i as f64 / FINGER_RING as f64;
                let offset = math::add(math::scale(side, r * phi.cos()), math::scale(up, r * phi.sin()));
                let v = math::add(center, offset);
                template.push(v);
                let along = math::scale(d, s.max(0.0));
                let mut basis = [[0.0; NUM_SHAPE]; 3];
                for c in 0..3 {
                    basis[c][0] = 0.08 * v[c];
                    basis[c][1] = 0.1 * along[c];
                    // Per-finger length: index, middle, ring, pinky, thumb.
                    let slot = [8, 4, 5, 6, 7][f_idx];
                    basis[c][slot] = 0.15 * along[c];
                }
                basis[0][2] = 0.1 * finger.base[0];
                basis[2][3] = 0.15 * v[2];
                basis[1][9] = 0.1 * finger.base[1];
                shape.push(basis);
                skin.push(w);
            }
        }
        tube_faces(&mut faces, first, FINGER_RING, finger.rings);
        fan_faces(&mut faces, first + (finger.rings - 1) * FINGER_RING, FINGER_RING);
        // Stitch the buried root ring to the palm so the mesh is one component.
        for i in 0..FINGER_RING {
            let a = first + i;
            let b = first + (i + 1) % FINGER_RING;
            let mid = math::scale(math::add(template[a], template[b]), 0.5);
            let nearest = palm_vertices
                .iter()
                .enumerate()
                .min_by(|x, y| {
                    math::norm(math::sub(*x.1, mid)).total_cmp(&math::norm(math::sub(*y.1, mid)))
                })
                .map(|(i, _)| i)
                .unwrap_or(0);
            faces.push([a as u32, b as u32, nearest as u32]);
        }
        let mut joint_s = 0.0;
        for (seg, &j) in finger.joints.iter().enumerate() {
            rest_rows[j] = ring_interpolation_row(first, FINGER_RING, &stations, joint_s);
            joint_s += finger.lengths[seg];
        }
        tip_rows[f_idx] = ring_interpolation_row(first, FINGER_RING, &stations, total);
    }
    assert_eq!(template.len(), NUM_VERTICES, "stylized hand vertex budget");

    // 21-joint regressor: wrist, then thumb, index, middle, ring, pinky.
    let chains: [(usize, [usize; 3]); 5] = [
        (0, [13, 14, 15]),
        (1, [1, 2, 3]),
        (2, [4, 5, 6]),
        (3, [10, 11, 12]),
        (4, [7, 8, 9]),
    ];
    let mut joint_regressor = Vec::with_capacity(NUM_JOINTS);
    joint_regressor.push(rest_rows[0].clone());
    for (tip, chain) in chains {
        for j in chain {
            joint_regressor.push(rest_rows[j].clone());
        }
        joint_regressor.push(tip_rows[tip].clone());
    }

    let pose_pca_basis: Vec<Vec<f64>> = (0..NUM_POSE)
        .map(|i| (0..n_pc).map(|c| if c == i { 1.0 } else { 0.0 }).collect())
        .collect();

    HandModel::from_parts(
        template,
        faces,
        shape,
        pose_pca_basis,
        vec![0.0; NUM_POSE],
        vec![[[0.0; NUM_POSE]; 3]; NUM_VERTICES],
        skin,
        STYLIZED_PARENTS,
        joint_regressor,
        rest_rows,
    )
    .expect("stylized hand satisfies the model invariants")
}
