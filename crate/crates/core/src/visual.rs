//! Frame-level visual encoder: a holistic projection of frame appearance and
//! a fine-grained summary from a spatial and a semantic object graph.

use std::f64::consts::{FRAC_PI_4, FRAC_PI_8, TAU};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::graph::{learn_block_adjacency, segment_mean, AttnGcnParams, DenseGraph, TypedEdgeGcnParams};
use crate::nn::Linear;
use crate::tensor::{ParamSpec, ParamStore, Tape, Tensor, TensorError, Var};
use crate::{Error, Result};

/// Center distance, as a fraction of the frame diagonal, beyond which two
/// non-overlapping objects get no spatial edge.
pub const SPATIAL_DISTANCE_THRESHOLD: f64 = 0.5;
/// IoU at or above which two boxes count as overlapping.
pub const OVERLAP_IOU: f64 = 0.5;

pub const TYPE_INSIDE: u8 = 1;
pub const TYPE_COVER: u8 = 2;
pub const TYPE_OVERLAP: u8 = 3;
/// First of the eight direction types; east, then counter-clockwise in 45° steps.
pub const TYPE_EAST: u8 = 4;

/// Per-frame detector output. Boxes are `[x, y, w, h]` in pixels with the
/// top-left corner at `(x, y)`; `frame_size` is `[width, height]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFeatures {
    pub appearance: Vec<f64>,
    pub objects: Tensor,
    pub class_attr: Tensor,
    pub boxes: Vec<[f64; 4]>,
    pub frame_size: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipFeatures {
    pub frames: Vec<FrameFeatures>,
}

fn data_err(msg: String) -> Error {
    Error::Data(msg)
}

impl FrameFeatures {
    pub fn n_objects(&self) -> usize {
        self.boxes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.boxes.len();
        if n == 0 {
            return Err(data_err("frame without objects".into()));
        }
        if self.objects.rank() != 2 || self.class_attr.rank() != 2 {
            return Err(data_err("object features must be matrices".into()));
        }
        if self.objects.rows() != n || self.class_attr.rows() != n {
            return Err(data_err(format!(
                "{} object rows and {} class rows for {n} boxes",
                self.objects.rows(),
                self.class_attr.rows()
            )));
        }
        let [fw, fh] = self.frame_size;
        if !(fw > 0.0 && fh > 0.0) {
            return Err(data_err(format!("bad frame size {:?}", self.frame_size)));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            check_box(b).map_err(|e| data_err(format!("box {i}: {e}")))?;
            let [x, y, w, h] = *b;
            if x < 0.0 || y < 0.0 || x + w > fw || y + h > fh {
                return Err(data_err(format!("box {i} {b:?} leaves the {fw}×{fh} frame")));
            }
        }
        Ok(())
    }
}

impl ClipFeatures {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Every frame valid and sharing object count and feature extents.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| data_err("clip without frames".into()))?;
        for (f, frame) in self.frames.iter().enumerate() {
            frame.validate().map_err(|e| data_err(format!("frame {f}: {e}")))?;
            let same = frame.appearance.len() == first.appearance.len()
                && frame.n_objects() == first.n_objects()
                && frame.objects.cols() == first.objects.cols()
                && frame.class_attr.cols() == first.class_attr.cols();
            if !same {
                return Err(data_err(format!("frame {f} extents differ from frame 0")));
            }
        }
        Ok(())
    }
}

fn check_box(b: &[f64; 4]) -> std::result::Result<(), TensorError> {
    if !b.iter().all(|v| v.is_finite()) || b[2] <= 0.0 || b[3] <= 0.0 {
        return Err(TensorError::Contract(format!("degenerate box {b:?}")));
    }
    Ok(())
}

fn contains(outer: &[f64; 4], inner: &[f64; 4]) -> bool {
    inner[0] >= outer[0]
        && inner[1] >= outer[1]
        && inner[0] + inner[2] <= outer[0] + outer[2]
        && inner[1] + inner[3] <= outer[1] + outer[3]
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let iy = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

/// Relation type of the edge `a → b`, or `None` when the pair is too far apart.
pub fn spatial_relation(a: &[f64; 4], b: &[f64; 4], frame_size: [f64; 2]) -> Result<Option<u8>> {
    check_box(a)?;
    check_box(b)?;
    if a == b {
        return Ok(Some(TYPE_OVERLAP));
    }
    if contains(b, a) {
        return Ok(Some(TYPE_INSIDE));
    }
    if contains(a, b) {
        return Ok(Some(TYPE_COVER));
    }
    if iou(a, b) >= OVERLAP_IOU {
        return Ok(Some(TYPE_OVERLAP));
    }
    let dx = (b[0] + b[2] / 2.0) - (a[0] + a[2] / 2.0);
    // image rows grow downwards; angles are measured with y pointing up
    let dy = (a[1] + a[3] / 2.0) - (b[1] + b[3] / 2.0);
    let diag = frame_size[0].hypot(frame_size[1]);
    if dx.hypot(dy) > SPATIAL_DISTANCE_THRESHOLD * diag {
        return Ok(None);
    }
    let angle = (dy.atan2(dx) + FRAC_PI_8).rem_euclid(TAU);
    let octant = ((angle / FRAC_PI_4) as u8).min(7);
    Ok(Some(TYPE_EAST + octant))
}

/// Typed spatial graph over one frame's boxes.
pub fn classify_spatial_edges(boxes: &[[f64; 4]], frame_size: [f64; 2]) -> Result<DenseGraph> {
    let n = boxes.len();
    let mut types = vec![None; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                types[i * n + j] = spatial_relation(&boxes[i], &boxes[j], frame_size)?;
            } else {
                check_box(&boxes[i])?;
            }
        }
    }
    DenseGraph::from_edge_types(n, types)
}

/// `[x/W, y/H, (x+w)/W, (y+h)/H, w/W, h/H]` per box.
pub fn position_features(boxes: &[[f64; 4]], frame_size: [f64; 2]) -> Result<Tensor> {
    let [fw, fh] = frame_size;
    let data = boxes
        .iter()
        .flat_map(|&[x, y, w, h]| [x / fw, y / fh, (x + w) / fw, (y + h) / fh, w / fw, h / fh])
        .collect();
    Ok(Tensor::matrix(boxes.len(), 6, data)?)
}

fn stack_rows<'a>(mats: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let rows: Vec<&[f64]> = mats.flat_map(|m| (0..m.rows()).map(move |r| m.row(r))).collect();
    Ok(Tensor::from_rows(&rows)?)
}

/// Parameter layout and forward passes of the visual encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEncoder {
    pub d: usize,
    pub d_a: usize,
    pub d_o: usize,
    pub d_c: usize,
    pub n_n: usize,
    pub layers: usize,
}

impl VisualEncoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        VisualEncoder {
            d: cfg.d,
            d_a: cfg.d_a,
            d_o: cfg.d_o,
            d_c: cfg.d_c,
            n_n: cfg.n_n,
            layers: cfg.gcn_layers,
        }
    }

    fn holistic(&self) -> Linear {
        Linear::new("visual.holistic", self.d_a, self.d)
    }

    fn object_proj(&self) -> Linear {
        Linear::new("visual.obj", self.d_o, self.d)
    }

    fn position_proj(&self) -> Linear {
        Linear::new("visual.pos", 6, self.d)
    }

    fn class_proj(&self) -> Linear {
        Linear::new("visual.cls", self.d_c, self.d)
    }

    fn spatial_init(&self) -> Linear {
        Linear::without_bias("visual.sp_init", 2 * self.d, self.d)
    }

    fn semantic_init(&self) -> Linear {
        Linear::without_bias("visual.se_init", 2 * self.d, self.d)
    }

    fn spatial_gcn(&self, l: usize) -> TypedEdgeGcnParams {
        TypedEdgeGcnParams::new(format!("visual.sp_gcn.{l}"))
    }

    fn semantic_gcn(&self, l: usize) -> AttnGcnParams {
        AttnGcnParams::new(format!("visual.se_gcn.{l}"))
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = Vec::new();
        for lin in [
            self.holistic(),
            self.object_proj(),
            self.position_proj(),
            self.class_proj(),
            self.spatial_init(),
            self.semantic_init(),
        ] {
            s.extend(lin.specs());
        }
        for l in 0..self.layers {
            s.extend(self.spatial_gcn(l).specs(self.d));
            s.extend(self.semantic_gcn(l).specs(self.d));
        }
        s.push(ParamSpec::weight("visual.learner.w1", self.d, self.d));
        s.push(ParamSpec::weight("visual.learner.w2", self.d, self.d));
        s
    }

    fn check_frame(&self, f: &FrameFeatures) -> Result<()> {
        f.validate()?;
        if f.appearance.len() != self.d_a || f.objects.cols() != self.d_o || f.class_attr.cols() != self.d_c {
            return Err(data_err(format!(
                "frame extents ({}, {}, {}) differ from configured ({}, {}, {})",
                f.appearance.len(),
                f.objects.cols(),
                f.class_attr.cols(),
                self.d_a,
                self.d_o,
                self.d_c
            )));
        }
        Ok(())
    }

    /// Holistic rows `appearance_f · W_g + b`, one per frame.
    pub fn encode_holistic(&self, tape: &mut Tape, store: &ParamStore, clip: &ClipFeatures) -> Result<Var> {
        clip.validate()?;
        let rows: Vec<&[f64]> = clip.frames.iter().map(|f| f.appearance.as_slice()).collect();
        for f in &clip.frames {
            self.check_frame(f)?;
        }
        let a = tape.constant(Tensor::from_rows(&rows)?);
        self.holistic().forward(tape, store, a)
    }

    /// Fine-grained rows for a batch of frames, each frame's two object
    /// graphs kept as separate diagonal blocks.
    pub fn encode_frames(&self, tape: &mut Tape, store: &ParamStore, frames: &[FrameFeatures]) -> Result<Var> {
        if frames.is_empty() {
            return Err(data_err("no frames to encode".into()));
        }
        let mut blocks: Vec<Range<usize>> = Vec::with_capacity(frames.len());
        let mut spatial = Vec::with_capacity(frames.len());
        let mut positions = Vec::with_capacity(frames.len());
        let mut start = 0;
        for f in frames {
            self.check_frame(f)?;
            let n = f.n_objects();
            blocks.push(start..start + n);
            start += n;
            spatial.push(classify_spatial_edges(&f.boxes, f.frame_size)?);
            positions.push(position_features(&f.boxes, f.frame_size)?);
        }
        let spatial = DenseGraph::block_diagonal(&spatial)?;
        let objects = tape.constant(stack_rows(frames.iter().map(|f| &f.objects))?);
        let classes = tape.constant(stack_rows(frames.iter().map(|f| &f.class_attr))?);
        let positions = tape.constant(stack_rows(positions.iter())?);

        let o = self.object_proj().forward(tape, store, objects)?;
        let p = self.position_proj().forward(tape, store, positions)?;
        let c = self.class_proj().forward(tape, store, classes)?;
        let op = tape.concat_cols(&[o, p])?;
        let oc = tape.concat_cols(&[o, c])?;
        let mut v_sp = self.spatial_init().forward(tape, store, op)?;
        let mut v_se = self.semantic_init().forward(tape, store, oc)?;

        let w1 = tape.param(store, "visual.learner.w1")?;
        let w2 = tape.param(store, "visual.learner.w2")?;
        let (_, semantic) = learn_block_adjacency(tape, w1, w2, v_se, self.n_n, &blocks)?;
        for l in 0..self.layers {
            v_sp = self.spatial_gcn(l).bind(tape, store)?.forward(tape, v_sp, &spatial)?;
            v_se = self.semantic_gcn(l).bind(tape, store)?.forward(tape, v_se, &semantic)?;
        }
        let sp = segment_mean(tape, v_sp, &blocks)?;
        let se = segment_mean(tape, v_se, &blocks)?;
        Ok(tape.add(sp, se)?)
    }

    /// Fine-grained `[d]` summary of a single frame.
    pub fn encode_frame(&self, tape: &mut Tape, store: &ParamStore, frame: &FrameFeatures) -> Result<Var> {
        let x = self.encode_frames(tape, store, std::slice::from_ref(frame))?;
        Ok(tape.reshape(x, &[self.d])?)
    }

    /// `(X_Vg, X_Vl)`, both `[N_f×d]`.
    pub fn encode_clip(&self, tape: &mut Tape, store: &ParamStore, clip: &ClipFeatures) -> Result<(Var, Var)> {
        let g = self.encode_holistic(tape, store, clip)?;
        let l = self.encode_frames(tape, store, &clip.frames)?;
        Ok((g, l))
    }
}
