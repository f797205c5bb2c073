//! Fixed-capacity reservoir memory of `(x, y, l, t, m)` replay tuples with
//! mask rescaling and run-length coding.
//!
//! Items store the exact training view seen at insertion together with the
//! logits and hard propagation masks sampled at that moment; neither is ever
//! refreshed. Masks whose spatial dimensions exceed 16x16 are kept at half
//! resolution (nearest neighbor) and restored on retrieval.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Spatial size above which masks are stored at half resolution.
pub const MASK_STORE_THRESHOLD: usize = 16;

// ---------------------------------------------------------------------------
// mask rescaling

/// Nearest-neighbor factor-2 reduction; odd inputs are padded to even before
/// sampling and cropped again on restore.
pub fn downscale_mask(mask: &Array3<u8>) -> Array3<u8> {
    let (c, h, w) = mask.dim();
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = Array3::<u8>::zeros((c, oh, ow));
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ci, y, x)] = mask[(ci, (2 * y).min(h - 1), (2 * x).min(w - 1))];
            }
        }
    }
    out
}

/// Inverse of [`downscale_mask`]: 2x2 replication cropped to `target`.
pub fn upscale_mask(mask: &Array3<u8>, target: (usize, usize)) -> Array3<u8> {
    let (c, h, w) = mask.dim();
    let (th, tw) = target;
    let mut out = Array3::<u8>::zeros((c, th, tw));
    for ci in 0..c {
        for y in 0..th {
            for x in 0..tw {
                out[(ci, y, x)] = mask[(ci, (y / 2).min(h - 1), (x / 2).min(w - 1))];
            }
        }
    }
    out
}

/// A binary propagation mask as held in buffer slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredMask {
    pub data: Array3<u8>,
    pub full_res: (usize, usize),
}

impl StoredMask {
    /// Store a full-resolution mask, reducing it when above the threshold.
    pub fn store(mask: &Array3<u8>) -> Result<StoredMask> {
        if mask.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be binary".to_string()));
        }
        let (_, h, w) = mask.dim();
        let data = if h > MASK_STORE_THRESHOLD || w > MASK_STORE_THRESHOLD {
            downscale_mask(mask)
        } else {
            mask.clone()
        };
        Ok(StoredMask {
            data,
            full_res: (h, w),
        })
    }

    /// Restore to full tap resolution.
    pub fn restore(&self) -> Array3<u8> {
        let (_, h, w) = self.data.dim();
        if (h, w) == self.full_res {
            self.data.clone()
        } else {
            upscale_mask(&self.data, self.full_res)
        }
    }
}

// ---------------------------------------------------------------------------
// run-length codec

/// Encode a binary sequence as alternating `(value, run_length)` pairs.
pub fn rle_encode(bits: &[u8]) -> Result<Vec<(u8, u32)>> {
    if bits.iter().any(|&b| b > 1) {
        return Err(Error::invalid("rle input must be binary".to_string()));
    }
    let mut runs = Vec::new();
    let mut iter = bits.iter();
    let Some(&first) = iter.next() else {
        return Ok(runs);
    };
    let mut cur = first;
    let mut len: u32 = 1;
    for &b in iter {
        if b == cur {
            len += 1;
        } else {
            runs.push((cur, len));
            cur = b;
            len = 1;
        }
    }
    runs.push((cur, len));
    Ok(runs)
}

pub fn rle_decode(runs: &[(u8, u32)]) -> Vec<u8> {
    let total: usize = runs.iter().map(|&(_, l)| l as usize).sum();
    let mut out = Vec::with_capacity(total);
    for &(v, l) in runs {
        out.extend(std::iter::repeat_n(v, l as usize));
    }
    out
}

// ---------------------------------------------------------------------------
// replay items

/// One stored example: input view, label, recorded logits, task id, and
/// (for the attention-distilling method) per-layer hard masks.
#[derive(Clone)]
pub struct ReplayItem<S: Scalar> {
    pub input: Array3<S>,
    pub label: u16,
    pub logits: Array1<S>,
    pub task: u16,
    pub masks: Option<Vec<StoredMask>>,
    /// Item drawn from the pretraining stream rather than the CL stream.
    pub from_pretrain: bool,
}

/// A decoded batch of replay items ready for the model.
pub struct ReplayBatch<S: Scalar> {
    pub inputs: ArrayD<S>, // (b, c, h, w)
    pub labels: Vec<usize>,
    pub logits: Array2<S>,
    pub tasks: Vec<usize>,
    /// Per tap layer, `(b, c, h, w)` hard masks restored to tap resolution.
    pub masks: Option<Vec<ArrayD<S>>>,
    pub from_pretrain: Vec<bool>,
}

impl<S: Scalar> ReplayBatch<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

// ---------------------------------------------------------------------------
// the reservoir

/// Reservoir-sampled memory. An optional slice of slots is reserved for
/// pretraining examples, which follow their own reservoir.
pub struct ReservoirBuffer<S: Scalar> {
    cl_capacity: usize,
    cl_items: Vec<ReplayItem<S>>,
    cl_seen: u64,
    pretrain_capacity: usize,
    pretrain_items: Vec<ReplayItem<S>>,
    pretrain_seen: u64,
}

impl<S: Scalar> ReservoirBuffer<S> {
    pub fn new(capacity: usize) -> Self {
        Self::with_pretrain_fraction(capacity, 0.0).expect("fraction 0 is valid")
    }

    /// Reserve `round(fraction * capacity)` slots for pretraining examples.
    pub fn with_pretrain_fraction(capacity: usize, fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::invalid(format!(
                "pretrain fraction {} out of range [0,1]",
                fraction
            )));
        }
        let pretrain_capacity = (fraction * capacity as f64).round() as usize;
        Ok(ReservoirBuffer {
            cl_capacity: capacity - pretrain_capacity,
            cl_items: Vec::new(),
            cl_seen: 0,
            pretrain_capacity,
            pretrain_items: Vec::new(),
            pretrain_seen: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.cl_capacity + self.pretrain_capacity
    }

    pub fn pretrain_capacity(&self) -> usize {
        self.pretrain_capacity
    }

    pub fn len(&self) -> usize {
        self.cl_items.len() + self.pretrain_items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stream examples offered so far (CL partition).
    pub fn seen_count(&self) -> u64 {
        self.cl_seen
    }

    /// Offer a CL-stream item; returns whether it was retained.
    pub fn reservoir_add(&mut self, item: ReplayItem<S>, rng: &mut ChaCha12Rng) -> bool {
        Self::offer(
            &mut self.cl_items,
            self.cl_capacity,
            &mut self.cl_seen,
            item,
            rng,
        )
    }

    /// Offer a pretraining-stream item into the reserved partition.
    pub fn pretrain_add(&mut self, item: ReplayItem<S>, rng: &mut ChaCha12Rng) -> bool {
        let mut item = item;
        item.from_pretrain = true;
        Self::offer(
            &mut self.pretrain_items,
            self.pretrain_capacity,
            &mut self.pretrain_seen,
            item,
            rng,
        )
    }

    fn offer(
        items: &mut Vec<ReplayItem<S>>,
        capacity: usize,
        seen: &mut u64,
        item: ReplayItem<S>,
        rng: &mut ChaCha12Rng,
    ) -> bool {
        *seen += 1;
        if capacity == 0 {
            return false;
        }
        if items.len() < capacity {
            items.push(item);
            true
        } else {
            let slot = rng.gen_range(0..*seen);
            if (slot as usize) < capacity {
                items[slot as usize] = item;
                true
            } else {
                false
            }
        }
    }

    fn slot(&self, i: usize) -> &ReplayItem<S> {
        if i < self.cl_items.len() {
            &self.cl_items[i]
        } else {
            &self.pretrain_items[i - self.cl_items.len()]
        }
    }

    /// Uniform draw with replacement over occupied slots; empty buffer yields
    /// an empty batch (callers treat replay terms as zero).
    pub fn sample_batch(&self, batch_size: usize, rng: &mut ChaCha12Rng) -> Vec<&ReplayItem<S>> {
        let n = self.len();
        if n == 0 {
            return Vec::new();
        }
        (0..batch_size).map(|_| self.slot(rng.gen_range(0..n))).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReplayItem<S>> {
        self.cl_items.iter().chain(self.pretrain_items.iter())
    }
}

/// Decode a drawn set of items into a batch, restoring masks to tap
/// resolution. Masks are included only if every item carries them.
pub fn assemble_batch<S: Scalar>(items: &[&ReplayItem<S>]) -> ReplayBatch<S> {
    assert!(!items.is_empty(), "assemble_batch on empty draw");
    let b = items.len();
    let (c, h, w) = items[0].input.dim();
    let mut inputs = ArrayD::<S>::zeros(IxDyn(&[b, c, h, w]));
    for (i, item) in items.iter().enumerate() {
        inputs
            .index_axis_mut(Axis(0), i)
            .assign(&item.input.clone().into_dyn());
    }
    let k = items[0].logits.len();
    let mut logits = Array2::<S>::zeros((b, k));
    for (i, item) in items.iter().enumerate() {
        logits.row_mut(i).assign(&item.logits);
    }
    let labels = items.iter().map(|it| it.label as usize).collect();
    let tasks = items.iter().map(|it| it.task as usize).collect();
    let from_pretrain = items.iter().map(|it| it.from_pretrain).collect();

    let masks = if items.iter().all(|it| it.masks.is_some()) {
        let layers = items[0].masks.as_ref().expect("checked").len();
        let mut per_layer = Vec::with_capacity(layers);
        for l in 0..layers {
            let first = items[0].masks.as_ref().expect("checked")[l].restore();
            let (mc, mh, mw) = first.dim();
            let mut stack = ArrayD::<S>::zeros(IxDyn(&[b, mc, mh, mw]));
            for (i, item) in items.iter().enumerate() {
                let m = item.masks.as_ref().expect("checked")[l].restore();
                let mut dst = stack.index_axis_mut(Axis(0), i);
                for (d, &s) in dst.iter_mut().zip(m.iter()) {
                    *d = S::from(s).expect("u8 fits");
                }
            }
            per_layer.push(stack);
        }
        Some(per_layer)
    } else {
        None
    };

    ReplayBatch {
        inputs,
        labels,
        logits,
        tasks,
        masks,
        from_pretrain,
    }
}

// ---------------------------------------------------------------------------
// serialization (versioned binary section for checkpoints)

const BUFFER_MAGIC: &[u8; 4] = b"BUF1";

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Serde("buffer section truncated".to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl<S: Scalar> ReservoirBuffer<S> {
    /// Serialize the slot table; masks are RLE-coded.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(BUFFER_MAGIC);
        w.u32(1); // version
        w.u64(self.cl_capacity as u64);
        w.u64(self.cl_seen);
        w.u64(self.pretrain_capacity as u64);
        w.u64(self.pretrain_seen);
        w.u32(self.cl_items.len() as u32);
        w.u32(self.pretrain_items.len() as u32);
        for item in self.cl_items.iter().chain(self.pretrain_items.iter()) {
            Self::write_item(&mut w, item);
        }
        w.0
    }

    fn write_item(w: &mut Writer, item: &ReplayItem<S>) {
        w.u16(item.label);
        w.u16(item.task);
        w.u8(item.from_pretrain as u8);
        let (c, h, wd) = item.input.dim();
        w.u32(c as u32);
        w.u32(h as u32);
        w.u32(wd as u32);
        for &v in item.input.iter() {
            w.f64(v.as_f64());
        }
        w.u32(item.logits.len() as u32);
        for &v in item.logits.iter() {
            w.f64(v.as_f64());
        }
        match &item.masks {
            None => w.u32(0),
            Some(masks) => {
                w.u32(masks.len() as u32);
                for m in masks {
                    let (mc, mh, mw) = m.data.dim();
                    w.u32(mc as u32);
                    w.u32(mh as u32);
                    w.u32(mw as u32);
                    w.u32(m.full_res.0 as u32);
                    w.u32(m.full_res.1 as u32);
                    let flat: Vec<u8> = m.data.iter().copied().collect();
                    let runs = rle_encode(&flat).expect("stored masks are binary");
                    w.u32(runs.len() as u32);
                    for (v, l) in runs {
                        w.u8(v);
                        w.u32(l);
                    }
                }
            }
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != BUFFER_MAGIC {
            return Err(Error::Serde("bad buffer magic".to_string()));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::Serde(format!("unsupported buffer version {}", version)));
        }
        let cl_capacity = r.u64()? as usize;
        let cl_seen = r.u64()?;
        let pretrain_capacity = r.u64()? as usize;
        let pretrain_seen = r.u64()?;
        let n_cl = r.u32()? as usize;
        let n_pre = r.u32()? as usize;
        let mut cl_items = Vec::with_capacity(n_cl);
        let mut pretrain_items = Vec::with_capacity(n_pre);
        for i in 0..n_cl + n_pre {
            let item = Self::read_item(&mut r)?;
            if i < n_cl {
                cl_items.push(item);
            } else {
                pretrain_items.push(item);
            }
        }
        Ok(ReservoirBuffer {
            cl_capacity,
            cl_items,
            cl_seen,
            pretrain_capacity,
            pretrain_items,
            pretrain_seen,
        })
    }

    fn read_item(r: &mut Reader) -> Result<ReplayItem<S>> {
        let label = r.u16()?;
        let task = r.u16()?;
        let from_pretrain = r.u8()? != 0;
        let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let mut input = Array3::<S>::zeros((c, h, w));
        for v in input.iter_mut() {
            *v = S::of_f64(r.f64()?);
        }
        let k = r.u32()? as usize;
        let mut logits = Array1::<S>::zeros(k);
        for v in logits.iter_mut() {
            *v = S::of_f64(r.f64()?);
        }
        let n_masks = r.u32()? as usize;
        let masks = if n_masks == 0 {
            None
        } else {
            let mut ms = Vec::with_capacity(n_masks);
            for _ in 0..n_masks {
                let (mc, mh, mw) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
                let full_res = (r.u32()? as usize, r.u32()? as usize);
                let n_runs = r.u32()? as usize;
                let mut runs = Vec::with_capacity(n_runs);
                for _ in 0..n_runs {
                    let v = r.u8()?;
                    let l = r.u32()?;
                    runs.push((v, l));
                }
                let flat = rle_decode(&runs);
                if flat.len() != mc * mh * mw {
                    return Err(Error::Serde("mask run length mismatch".to_string()));
                }
                let data = Array3::from_shape_vec((mc, mh, mw), flat)
                    .map_err(|e| Error::Serde(e.to_string()))?;
                ms.push(StoredMask {
                    data,
                    full_res,
                });
            }
            Some(ms)
        };
        Ok(ReplayItem {
            input,
            label,
            logits,
            task,
            masks,
            from_pretrain,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use proptest::prelude::*;

    fn item(label: u16, task: u16, with_masks: bool) -> ReplayItem<f32> {
        let masks = with_masks.then(|| {
            let m = Array3::from_shape_fn((2, 6, 6), |(c, y, x)| ((c + y + x) % 2) as u8);
            vec![StoredMask::store(&m).unwrap()]
        });
        ReplayItem {
            input: Array3::from_elem((1, 4, 4), label as f32),
            label,
            logits: Array1::from_vec(vec![label as f32, -(label as f32)]),
            task,
            masks,
            from_pretrain: false,
        }
    }

    #[test]
    fn fill_phase_accepts_everything() {
        let mut buf = ReservoirBuffer::<f32>::new(10);
        let mut rng = SeedTree::new(0).rng("res");
        for i in 0..10 {
            assert!(buf.reservoir_add(item(i, 0, false), &mut rng));
        }
        assert_eq!(buf.len(), 10);
        assert_eq!(buf.seen_count(), 10);
    }

    #[test]
    fn zero_capacity_never_accepts() {
        let mut buf = ReservoirBuffer::<f32>::new(0);
        let mut rng = SeedTree::new(1).rng("res");
        for i in 0..20 {
            assert!(!buf.reservoir_add(item(i, 0, false), &mut rng));
        }
        assert!(buf.is_empty());
        assert_eq!(buf.seen_count(), 20);
    }

    #[test]
    fn retention_frequency_matches_reservoir_law() {
        // capacity 10, stream 100, 10k trials:每 index retained with p = 0.1
        let mut rng = SeedTree::new(2).rng("res");
        let trials = 10_000;
        let mut hits = vec![0u32; 100];
        for _ in 0..trials {
            let mut buf = ReservoirBuffer::<f32>::new(10);
            for i in 0..100u16 {
                buf.reservoir_add(item(i, 0, false), &mut rng);
            }
            for it in buf.iter() {
                hits[it.label as usize] += 1;
            }
        }
        for (i, &h) in hits.iter().enumerate() {
            let freq = h as f64 / trials as f64;
            assert!(
                (freq - 0.1).abs() <= 0.01,
                "index {} retained with frequency {}",
                i,
                freq
            );
        }
    }

    #[test]
    fn sampling_is_uniform_with_replacement() {
        let mut buf = ReservoirBuffer::<f32>::new(5);
        let mut rng = SeedTree::new(3).rng("res");
        for i in 0..5 {
            buf.reservoir_add(item(i, 0, false), &mut rng);
        }
        let mut counts = [0u32; 5];
        let mut srng = SeedTree::new(4).rng("draw");
        for _ in 0..10_000 {
            for it in buf.sample_batch(1, &mut srng) {
                counts[it.label as usize] += 1;
            }
        }
        for &c in &counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.2).abs() <= 0.02, "freq {}", freq);
        }
    }

    #[test]
    fn single_item_draw_repeats_it() {
        let mut buf = ReservoirBuffer::<f32>::new(4);
        let mut rng = SeedTree::new(5).rng("res");
        buf.reservoir_add(item(7, 3, true), &mut rng);
        let draw = buf.sample_batch(4, &mut rng);
        assert_eq!(draw.len(), 4);
        assert!(draw.iter().all(|it| it.label == 7));
        let batch = assemble_batch(&draw);
        assert_eq!(batch.inputs.shape(), &[4, 1, 4, 4]);
        assert_eq!(batch.tasks, vec![3, 3, 3, 3]);
        assert!(batch.masks.is_some());
    }

    #[test]
    fn empty_buffer_draws_empty() {
        let buf = ReservoirBuffer::<f32>::new(4);
        let mut rng = SeedTree::new(6).rng("res");
        assert!(buf.sample_batch(8, &mut rng).is_empty());
    }

    #[test]
    fn mask_store_threshold() {
        let big = Array3::<u8>::from_elem((1, 32, 32), 1);
        let stored = StoredMask::store(&big).unwrap();
        assert_eq!(stored.data.dim(), (1, 16, 16));
        assert_eq!(stored.restore().dim(), (1, 32, 32));

        let small = Array3::<u8>::from_elem((1, 8, 8), 1);
        let stored = StoredMask::store(&small).unwrap();
        assert_eq!(stored.data.dim(), (1, 8, 8));
    }

    #[test]
    fn block_constant_masks_round_trip_exactly() {
        let mut rng = SeedTree::new(7).rng("mask");
        for _ in 0..50 {
            let blocks = Array3::<u8>::from_shape_fn((2, 10, 12), |_| rng.gen_range(0..2u8));
            let mut full = Array3::<u8>::zeros((2, 20, 24));
            for c in 0..2 {
                for y in 0..20 {
                    for x in 0..24 {
                        full[(c, y, x)] = blocks[(c, y / 2, x / 2)];
                    }
                }
            }
            let stored = StoredMask::store(&full).unwrap();
            assert_eq!(stored.restore(), full);
        }
    }

    #[test]
    fn odd_dimension_round_trip_shape() {
        let m = Array3::<u8>::from_elem((1, 17, 19), 1);
        let stored = StoredMask::store(&m).unwrap();
        assert_eq!(stored.data.dim(), (1, 9, 10));
        let back = stored.restore();
        assert_eq!(back.dim(), (1, 17, 19));
        assert!(back.iter().all(|&v| v == 1));
    }

    #[test]
    fn non_binary_mask_rejected() {
        let m = Array3::<u8>::from_elem((1, 4, 4), 2);
        assert!(StoredMask::store(&m).is_err());
    }

    #[test]
    fn rle_examples() {
        assert_eq!(
            rle_encode(&[1, 1, 1, 0, 0, 1]).unwrap(),
            vec![(1, 3), (0, 2), (1, 1)]
        );
        assert_eq!(rle_encode(&[0; 64]).unwrap(), vec![(0, 64)]);
        assert!(rle_encode(&[0, 2, 1]).is_err());
        assert!(rle_encode(&[]).unwrap().is_empty());
    }

    #[test]
    fn buffer_serialization_round_trip() {
        let mut buf = ReservoirBuffer::<f32>::with_pretrain_fraction(6, 0.5).unwrap();
        let mut rng = SeedTree::new(8).rng("res");
        for i in 0..3 {
            buf.reservoir_add(item(i, 0, true), &mut rng);
        }
        for i in 10..13 {
            buf.pretrain_add(item(i, 0, false), &mut rng);
        }
        let bytes = buf.to_bytes();
        let loaded = ReservoirBuffer::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.len(), buf.len());
        assert_eq!(loaded.seen_count(), buf.seen_count());
        for (a, b) in buf.iter().zip(loaded.iter()) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.input, b.input);
            assert_eq!(a.logits, b.logits);
            assert_eq!(a.masks, b.masks);
            assert_eq!(a.from_pretrain, b.from_pretrain);
        }
    }

    #[test]
    fn pretrain_partition_sizes() {
        let buf = ReservoirBuffer::<f32>::with_pretrain_fraction(2000, 0.5).unwrap();
        assert_eq!(buf.pretrain_capacity(), 1000);
        assert_eq!(buf.capacity(), 2000);
        assert!(ReservoirBuffer::<f32>::with_pretrain_fraction(10, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn rle_round_trip(bits in proptest::collection::vec(0u8..2, 0..512)) {
            let runs = rle_encode(&bits).unwrap();
            prop_assert_eq!(rle_decode(&runs), bits);
            // runs alternate in value
            for w in runs.windows(2) {
                prop_assert_ne!(w[0].0, w[1].0);
            }
        }

        #[test]
        fn store_restore_preserves_binarity(seed in 0u64..1000) {
            let mut rng = SeedTree::new(seed).rng("m");
            let m = Array3::<u8>::from_shape_fn((1, 20, 20), |_| rng.gen_range(0..2u8));
            let stored = StoredMask::store(&m).unwrap();
            let flat: Vec<u8> = stored.data.iter().copied().collect();
            let coded = rle_decode(&rle_encode(&flat).unwrap());
            prop_assert_eq!(&flat, &coded);
            prop_assert!(stored.restore().iter().all(|&v| v <= 1));
        }
    }
}
