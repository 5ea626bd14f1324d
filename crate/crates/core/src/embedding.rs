//! Multi-semantic check-in embedding.
//!
//! Each check-in yields two rows: `tanh([W_p p + b_p ; W_t t + b_t])` for the
//! POI sequence and `tanh([W_c c + b_c ; W_t t + b_t])` for the category
//! sequence, where `p`, `c`, `t` are one-hot POI, category and time-slice
//! indices. The time half is shared between the two rows.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::data::{SubTrajectory, Vocabulary};
use crate::error::{Result, TulError};
use crate::nn::{join, uniform, NamedView, NamedViewMut, Parameters};

/// Index sequences of several trajectories packed back to back.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenBatch {
    pub pois: Vec<usize>,
    pub categories: Vec<usize>,
    pub slices: Vec<usize>,
    /// Time since the earliest kept check-in of the trajectory, in `time_unit` seconds.
    pub times: Vec<f32>,
    /// Sequence boundaries, `len = sequences + 1`.
    pub offsets: Vec<usize>,
}

impl TokenBatch {
    /// Packs trajectories. Sequences longer than `max_len` keep only their most
    /// recent `max_len` check-ins.
    pub fn from_trajectories<'a, I>(trajs: I, vocab: &Vocabulary, time_unit: f64, max_len: Option<usize>) -> Self
    where
        I: IntoIterator<Item = &'a SubTrajectory>,
    {
        let mut batch = TokenBatch {
            offsets: vec![0],
            ..Default::default()
        };
        for t in trajs {
            let mut records = &t.records[..];
            if let Some(max) = max_len {
                if records.len() > max {
                    log::warn!(
                        "truncating a {}-check-in trajectory of {} to its last {max}",
                        records.len(),
                        t.user_id
                    );
                    records = &records[records.len() - max..];
                }
            }
            let origin = records.iter().map(|r| r.timestamp).min().unwrap_or(0);
            for r in records {
                batch.pois.push(vocab.poi(&r.poi_id));
                batch.categories.push(vocab.category(&r.category_id));
                batch.slices.push(vocab.slice(r.timestamp));
                batch.times.push(((r.timestamp - origin) as f64 / time_unit) as f32);
            }
            batch.offsets.push(batch.pois.len());
        }
        batch
    }

    pub fn num_sequences(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn num_tokens(&self) -> usize {
        self.pois.len()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// `self` followed by `other`.
    pub fn concat(&self, other: &TokenBatch) -> TokenBatch {
        let shift = self.num_tokens();
        let mut out = self.clone();
        out.pois.extend_from_slice(&other.pois);
        out.categories.extend_from_slice(&other.categories);
        out.slices.extend_from_slice(&other.slices);
        out.times.extend_from_slice(&other.times);
        out.offsets
            .extend(other.offsets.iter().skip(1).map(|o| o + shift));
        out
    }
}

/// Embedded POI and category sequences of a single trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedTrajectory {
    pub poi: Array2<f32>,
    pub category: Array2<f32>,
    pub timestamps: Vec<i64>,
}

impl EmbeddedTrajectory {
    pub fn len(&self) -> usize {
        self.poi.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckinEmbedding {
    pub poi: Array2<f32>,
    pub poi_bias: Array1<f32>,
    pub category: Array2<f32>,
    pub category_bias: Array1<f32>,
    pub time: Array2<f32>,
    pub time_bias: Array1<f32>,
}

impl CheckinEmbedding {
    /// `dim` is split evenly between the location part and the time part.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, vocab: &Vocabulary, dim: usize) -> Self {
        let (loc, time) = (dim / 2, dim - dim / 2);
        let bound = 1.0 / (dim as f32).sqrt();
        Self {
            poi: uniform(rng, (vocab.num_pois(), loc), bound),
            poi_bias: uniform(rng, loc, bound),
            category: uniform(rng, (vocab.num_categories(), loc), bound),
            category_bias: uniform(rng, loc, bound),
            time: uniform(rng, (vocab.num_time_slices(), time), bound),
            time_bias: uniform(rng, time, bound),
        }
    }

    pub fn dim(&self) -> usize {
        self.loc_dim() + self.time.ncols()
    }

    fn loc_dim(&self) -> usize {
        self.poi.ncols()
    }

    /// Names (relative to this module) of the category and time tensors.
    pub const CONTEXT_PARAMS: [&'static str; 4] = ["category", "category_bias", "time", "time_bias"];

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let expect = [
            ("poi", self.poi.nrows(), vocab.num_pois()),
            ("category", self.category.nrows(), vocab.num_categories()),
            ("time", self.time.nrows(), vocab.num_time_slices()),
        ];
        for (name, have, want) in expect {
            if have != want {
                return Err(TulError::Shape(format!(
                    "{name} embedding has {have} rows but the vocabulary has {want} entries"
                )));
            }
        }
        if self.category.ncols() != self.loc_dim() {
            return Err(TulError::Shape("POI and category widths differ".into()));
        }
        Ok(())
    }

    /// Returns `(X_p, X_c)` over the packed tokens.
    pub fn forward(&self, batch: &TokenBatch) -> (Array2<f32>, Array2<f32>) {
        let n = batch.num_tokens();
        let l = self.loc_dim();
        let d = self.dim();
        let mut xp = Array2::<f32>::zeros((n, d));
        let mut xc = Array2::<f32>::zeros((n, d));
        for i in 0..n {
            let time = &self.time.row(batch.slices[i]) + &self.time_bias;
            let time = time.mapv(f32::tanh);
            let poi = (&self.poi.row(batch.pois[i]) + &self.poi_bias).mapv(f32::tanh);
            let cat = (&self.category.row(batch.categories[i]) + &self.category_bias).mapv(f32::tanh);
            xp.slice_mut(s![i, ..l]).assign(&poi);
            xp.slice_mut(s![i, l..]).assign(&time);
            xc.slice_mut(s![i, ..l]).assign(&cat);
            xc.slice_mut(s![i, l..]).assign(&time);
        }
        (xp, xc)
    }

    /// Scatters gradients w.r.t. `(X_p, X_c)` back into the lookup tables.
    /// `xp`, `xc` are the forward outputs.
    pub fn backward(
        &self,
        batch: &TokenBatch,
        (xp, xc): (&Array2<f32>, &Array2<f32>),
        (dxp, dxc): (&Array2<f32>, &Array2<f32>),
        grad: &mut CheckinEmbedding,
    ) {
        let l = self.loc_dim();
        let pre = |y: &Array2<f32>, dy: &Array2<f32>| {
            let mut g = dy.clone();
            ndarray::Zip::from(&mut g).and(y).for_each(|g, &y| *g *= 1.0 - y * y);
            g
        };
        let gp = pre(xp, dxp);
        let gc = pre(xc, dxc);
        for i in 0..batch.num_tokens() {
            let gpl = gp.slice(s![i, ..l]);
            let gcl = gc.slice(s![i, ..l]);
            let gt = &gp.slice(s![i, l..]) + &gc.slice(s![i, l..]);
            let mut row = grad.poi.row_mut(batch.pois[i]);
            row += &gpl;
            let mut row = grad.category.row_mut(batch.categories[i]);
            row += &gcl;
            let mut row = grad.time.row_mut(batch.slices[i]);
            row += &gt;
        }
        grad.poi_bias += &gp.slice(s![.., ..l]).sum_axis(Axis(0));
        grad.category_bias += &gc.slice(s![.., ..l]).sum_axis(Axis(0));
        grad.time_bias += &gp.slice(s![.., l..]).sum_axis(Axis(0));
        grad.time_bias += &gc.slice(s![.., l..]).sum_axis(Axis(0));
    }
}

impl Parameters for CheckinEmbedding {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        out.push((join(prefix, "poi"), self.poi.view().into_dyn()));
        out.push((join(prefix, "poi_bias"), self.poi_bias.view().into_dyn()));
        out.push((join(prefix, "category"), self.category.view().into_dyn()));
        out.push((join(prefix, "category_bias"), self.category_bias.view().into_dyn()));
        out.push((join(prefix, "time"), self.time.view().into_dyn()));
        out.push((join(prefix, "time_bias"), self.time_bias.view().into_dyn()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        out.push((join(prefix, "poi"), self.poi.view_mut().into_dyn()));
        out.push((join(prefix, "poi_bias"), self.poi_bias.view_mut().into_dyn()));
        out.push((join(prefix, "category"), self.category.view_mut().into_dyn()));
        out.push((join(prefix, "category_bias"), self.category_bias.view_mut().into_dyn()));
        out.push((join(prefix, "time"), self.time.view_mut().into_dyn()));
        out.push((join(prefix, "time_bias"), self.time_bias.view_mut().into_dyn()));
    }
}

/// Embeds one trajectory. OOV POIs and categories resolve to index 0.
pub fn embed_trajectory(
    traj: &SubTrajectory,
    vocab: &Vocabulary,
    params: &CheckinEmbedding,
) -> Result<EmbeddedTrajectory> {
    params.check_vocab(vocab)?;
    let batch = TokenBatch::from_trajectories([traj], vocab, 3600.0, None);
    let (poi, category) = params.forward(&batch);
    Ok(EmbeddedTrajectory {
        poi,
        category,
        timestamps: traj.records.iter().map(|r| r.timestamp).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, CheckinRecord};
    use crate::nn::gradcheck::check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (Vocabulary, SubTrajectory) {
        let t = SubTrajectory {
            user_id: "u".into(),
            interval_index: 0,
            records: vec![
                CheckinRecord::new("u", 3600, "a", "food"),
                CheckinRecord::new("u", 7 * 3600, "b", "bar"),
                CheckinRecord::new("u", 9 * 3600, "a", "food"),
            ],
        };
        (build_vocab(std::slice::from_ref(&t), 24).unwrap(), t)
    }

    #[test]
    fn zero_parameters_give_zero_rows() {
        let (vocab, t) = sample();
        let mut emb = CheckinEmbedding::new(&mut ChaCha8Rng::seed_from_u64(0), &vocab, 8);
        emb.fill(0.0);
        let e = embed_trajectory(&t, &vocab, &emb).unwrap();
        assert!(e.poi.iter().chain(e.category.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn definition_unrolled_for_one_checkin() {
        let (vocab, t) = sample();
        let mut emb = CheckinEmbedding::new(&mut ChaCha8Rng::seed_from_u64(0), &vocab, 4);
        emb.poi_bias.fill(0.0);
        emb.time_bias.fill(0.0);
        let one = SubTrajectory {
            records: vec![t.records[0].clone()],
            ..t.clone()
        };
        let e = embed_trajectory(&one, &vocab, &emb).unwrap();
        let v = emb.poi.row(vocab.poi("a"));
        let w = emb.time.row(1);
        let expect = [v[0].tanh(), v[1].tanh(), w[0].tanh(), w[1].tanh()];
        for (a, b) in e.poi.row(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn same_poi_different_hour_differs_only_in_time_block() {
        let (vocab, t) = sample();
        let emb = CheckinEmbedding::new(&mut ChaCha8Rng::seed_from_u64(1), &vocab, 8);
        let e = embed_trajectory(&t, &vocab, &emb).unwrap();
        let (r0, r2) = (e.poi.row(0), e.poi.row(2));
        assert_eq!(r0.slice(s![..4]), r2.slice(s![..4]));
        assert!(r0.slice(s![4..]).iter().zip(r2.slice(s![4..]).iter()).any(|(a, b)| a != b));
    }

    #[test]
    fn category_swap_leaves_poi_rows_alone() {
        let (vocab, t) = sample();
        let emb = CheckinEmbedding::new(&mut ChaCha8Rng::seed_from_u64(1), &vocab, 8);
        let mut swapped = t.clone();
        swapped.records[0].category_id = "bar".into();
        let a = embed_trajectory(&t, &vocab, &emb).unwrap();
        let b = embed_trajectory(&swapped, &vocab, &emb).unwrap();
        assert_eq!(a.poi, b.poi);
        assert_ne!(a.category.row(0), b.category.row(0));
    }

    #[test]
    fn lookup_equals_one_hot_product() {
        let (vocab, t) = sample();
        let emb = CheckinEmbedding::new(&mut ChaCha8Rng::seed_from_u64(2), &vocab, 6);
        let e = embed_trajectory(&t, &vocab, &emb).unwrap();
        for (i, r) in t.records.iter().enumerate() {
            let mut one_hot = Array1::<f32>::zeros(vocab.num_pois());
            one_hot[vocab.poi(&r.poi_id)] = 1.0;
            let loc = (emb.poi.t().dot(&one_hot) + &emb.poi_bias).mapv(f32::tanh);
            let mut t_hot = Array1::<f32>::zeros(24);
            t_hot[vocab.slice(r.timestamp)] = 1.0;
            let time = (emb.time.t().dot(&t_hot) + &emb.time_bias).mapv(f32::tanh);
            for j in 0..3 {
                assert!((e.poi[[i, j]] - loc[j]).abs() < 1e-6);
                assert!((e.poi[[i, 3 + j]] - time[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn oov_and_shape_errors() {
        let (vocab, t) = sample();
        let emb = CheckinEmbedding::new(&mut ChaCha8Rng::seed_from_u64(2), &vocab, 6);
        let mut unseen = t.clone();
        unseen.records[0].poi_id = "zzz".into();
        let batch = TokenBatch::from_trajectories([&unseen], &vocab, 3600.0, None);
        assert_eq!(batch.pois[0], 0);
        let other = build_vocab(
            &[SubTrajectory {
                records: vec![CheckinRecord::new("u", 0, "q", "r"), CheckinRecord::new("u", 1, "s", "r")],
                ..t.clone()
            },
            SubTrajectory {
                records: vec![CheckinRecord::new("u", 0, "x", "y")],
                ..t.clone()
            }],
            24,
        )
        .unwrap();
        assert!(matches!(embed_trajectory(&t, &other, &emb), Err(TulError::Shape(_))));
    }

    #[test]
    fn outputs_inside_open_interval() {
        let (vocab, t) = sample();
        let mut emb = CheckinEmbedding::new(&mut ChaCha8Rng::seed_from_u64(3), &vocab, 8);
        emb.scale(5.0);
        let e = embed_trajectory(&t, &vocab, &emb).unwrap();
        assert!(e.poi.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (vocab, t) = sample();
        let emb = CheckinEmbedding::new(&mut ChaCha8Rng::seed_from_u64(4), &vocab, 6);
        let batch = TokenBatch::from_trajectories([&t, &t], &vocab, 3600.0, None);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wp = uniform(&mut rng, (6, 6), 1.0);
        let wc = uniform(&mut rng, (6, 6), 1.0);
        let objective = |m: &CheckinEmbedding| {
            let (xp, xc) = m.forward(&batch);
            ((&xp * &wp).sum() + (&xc * &wc).sum()) as f64
        };
        let (xp, xc) = emb.forward(&batch);
        let mut g = emb.zeros_like();
        emb.backward(&batch, (&xp, &xc), (&wp, &wc), &mut g);
        check_params(&emb, &g, 6, 1e-2, 2e-3, objective);
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let (vocab, t) = sample();
        let b = TokenBatch::from_trajectories([&t], &vocab, 3600.0, Some(2));
        assert_eq!(b.pois, vec![vocab.poi("b"), vocab.poi("a")]);
        assert_eq!(b.times, vec![0.0, 2.0]);
    }
}
