use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::AttentionError;
use crate::numerics::weights::{ArchMeta, Tensor, WeightStore, ATTENTION_BRANCHES};
use crate::numerics::{Activation, DenseMatrix, Layer, MlpParams};

/// Parameters of one attention branch (self or cross) in one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub q: Layer,
    pub k: Layer,
    pub v: Layer,
    pub p: Layer,
    /// Value projection of the shared second pass.
    pub vbar: Layer,
    /// Output projection of the shared second pass.
    pub pbar: Layer,
    pub mlp: MlpParams,
    pub mlp_shared: MlpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub self_branch: BranchParams,
    pub cross_branch: BranchParams,
    pub heads: usize,
}

/// A complete trained (or seed-initialized) model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub meta: ArchMeta,
    pub encoder: MlpParams,
    pub blocks: Vec<BlockParams>,
    pub alpha: f64,
}

fn linear(store: &WeightStore, base: &str) -> Result<Layer, AttentionError> {
    let w = store.matrix(&format!("{base}/w"))?;
    let b = store.vector(&format!("{base}/b"))?;
    Ok(Layer::new(w, b, Activation::Linear)?)
}

impl BranchParams {
    fn load(store: &WeightStore, prefix: &str) -> Result<Self, AttentionError> {
        Ok(Self {
            q: linear(store, &format!("{prefix}/q"))?,
            k: linear(store, &format!("{prefix}/k"))?,
            v: linear(store, &format!("{prefix}/v"))?,
            p: linear(store, &format!("{prefix}/p"))?,
            vbar: linear(store, &format!("{prefix}/vbar"))?,
            pbar: linear(store, &format!("{prefix}/pbar"))?,
            mlp: store.mlp(&format!("{prefix}/mlp"), 3)?,
            mlp_shared: store.mlp(&format!("{prefix}/mlp_shared"), 3)?,
        })
    }

    /// Identity projections, zero biases and zero message MLPs: the block is
    /// then the identity map on descriptors.
    pub fn identity(d: usize) -> Self {
        let eye = || Layer::new(DenseMatrix::identity(d), vec![0.0; d], Activation::Linear).unwrap();
        let widths = [2 * d, 2 * d, d, d];
        Self {
            q: eye(),
            k: eye(),
            v: eye(),
            p: eye(),
            vbar: eye(),
            pbar: eye(),
            mlp: MlpParams::zeros(&widths),
            mlp_shared: MlpParams::zeros(&widths),
        }
    }

    pub fn dim(&self) -> usize {
        self.q.in_dim()
    }
}

impl Model {
    /// `Ok(None)` for an untrained (empty) store.
    pub fn from_store(store: &WeightStore) -> Result<Option<Self>, AttentionError> {
        let Some(meta) = store.validate()? else {
            return Ok(None);
        };
        if meta.d % meta.h != 0 {
            return Err(AttentionError::HeadSplit { d: meta.d, h: meta.h });
        }
        let encoder = store.mlp("enc", meta.encoder_widths().len() - 1)?;
        let mut blocks = Vec::with_capacity(meta.t);
        for t in 0..meta.t {
            let [s, c] = ATTENTION_BRANCHES;
            blocks.push(BlockParams {
                self_branch: BranchParams::load(store, &format!("block{t}/{s}"))?,
                cross_branch: BranchParams::load(store, &format!("block{t}/{c}"))?,
                heads: meta.h,
            });
        }
        let alpha = store.vector("transport/alpha")?[0];
        Ok(Some(Self {
            meta,
            encoder,
            blocks,
            alpha,
        }))
    }
}

/// Message-MLP output layers are scaled down by this factor so a random
/// block perturbs descriptors instead of replacing them.
const RANDOM_OUTPUT_GAIN: f64 = 0.1;

/// A seeded, architecture-complete store for shape and plumbing tests. It
/// carries `meta/random = 1` so tools can tell it apart from trained weights.
pub fn random_weights(meta: ArchMeta, alpha: f64, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    store.set("meta/d", Tensor::scalar(meta.d as f32));
    store.set("meta/h", Tensor::scalar(meta.h as f32));
    store.set("meta/T", Tensor::scalar(meta.t as f32));
    store.set("meta/random", Tensor::scalar(1.0));
    store.set("transport/alpha", Tensor::scalar(alpha as f32));
    store.insert_mlp("enc", &scaled_output(MlpParams::random(&meta.encoder_widths(), &mut rng)));
    for (name, shape) in meta.required_tensors() {
        if !name.starts_with("block") || store.get(&name).is_some() {
            continue;
        }
        // Projections come in (w, b) pairs; MLPs are inserted whole below.
        let parts: Vec<&str> = name.split('/').collect();
        if parts[2].starts_with("mlp") {
            let prefix = parts[..3].join("/");
            let mlp = scaled_output(MlpParams::random(&meta.message_mlp_widths(), &mut rng));
            store.insert_mlp(&prefix, &mlp);
            continue;
        }
        if shape.len() == 2 {
            let layer = MlpParams::random(&[shape[1], shape[0]], &mut rng);
            let l = &layer.layers()[0];
            store.set(name.clone(), Tensor::from_matrix(&l.weight));
            store.set(name.replace("/w", "/b"), Tensor::from_vector(&l.bias));
        }
    }
    store
}

fn scaled_output(mut mlp: MlpParams) -> MlpParams {
    if let Some(last) = mlp.layers_mut().last_mut() {
        last.weight = last.weight.scale(RANDOM_OUTPUT_GAIN);
        last.bias.iter_mut().for_each(|b| *b *= RANDOM_OUTPUT_GAIN);
    }
    mlp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_store_is_complete_and_loads() {
        let meta = ArchMeta { d: 8, h: 2, t: 2 };
        let store = random_weights(meta, -6.0, 1);
        assert_eq!(store.validate().unwrap(), Some(meta));
        let model = Model::from_store(&store).unwrap().unwrap();
        assert_eq!(model.blocks.len(), 2);
        assert_eq!(model.alpha, -6.0);
        assert_eq!(random_weights(meta, -6.0, 1), store);
        assert_ne!(random_weights(meta, -6.0, 2), store);
    }

    #[test]
    fn empty_store_is_untrained() {
        assert!(Model::from_store(&WeightStore::new()).unwrap().is_none());
    }

    #[test]
    fn bad_head_split() {
        let meta = ArchMeta { d: 6, h: 4, t: 1 };
        let store = random_weights(meta, -6.0, 1);
        assert!(matches!(Model::from_store(&store), Err(AttentionError::HeadSplit { d: 6, h: 4 })));
    }
}
