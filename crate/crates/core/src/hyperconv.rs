//! Marker vocabulary, per-marker kernel generators and the two
//! hyperconvolution operators built from them.
//!
//! A generator table stores one flattened kernel per vocabulary entry. The
//! encoder concatenates the kernels of the observed markers along the kernel
//! input axis and runs a single convolution over the stacked per-marker
//! features; the decoder convolves the latent map with each requested
//! marker's kernel independently.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{bail, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{conv2d, conv2d_backward, ConvSpec, Real, Tensor};

/// Global marker name ↔ index map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MarkerVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl MarkerVocabulary {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        let mut owned = Vec::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            let n = n.as_ref().trim();
            if n.is_empty() {
                bail!(Vocabulary, "empty marker name at index {i}");
            }
            if index.insert(n.to_string(), i).is_some() {
                bail!(Vocabulary, "duplicate marker name {n}");
            }
            owned.push(n.to_string());
        }
        Ok(Self { names: owned, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn lookup(&self, name: &str) -> Result<usize> {
        match self.index.get(name) {
            Some(&i) => Ok(i),
            None => bail!(Vocabulary, "unknown marker {name}"),
        }
    }

    pub fn name(&self, index: usize) -> Result<&str> {
        match self.names.get(index) {
            Some(n) => Ok(n),
            None => bail!(Vocabulary, "index {index} outside vocabulary of {}", self.len()),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Resolves an ordered list of names into a [`MarkerSet`].
    pub fn resolve<S: AsRef<str>>(&self, names: &[S]) -> Result<MarkerSet> {
        let idx = names
            .iter()
            .map(|n| self.lookup(n.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        MarkerSet::new(idx, self.len())
    }

    pub fn set_names(&self, set: &MarkerSet) -> Result<Vec<String>> {
        set.iter().map(|i| self.name(i).map(str::to_string)).collect()
    }
}

/// Ordered, duplicate-free list of vocabulary indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MarkerSet(Vec<usize>);

impl MarkerSet {
    pub fn new(markers: Vec<usize>, vocab_len: usize) -> Result<Self> {
        for (pos, &m) in markers.iter().enumerate() {
            if m >= vocab_len {
                bail!(Vocabulary, "marker index {m} outside vocabulary of {vocab_len}");
            }
            if markers[..pos].contains(&m) {
                bail!(Argument, "duplicate marker index {m}");
            }
        }
        Ok(Self(markers))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, marker: usize) -> bool {
        self.0.contains(&marker)
    }

    pub fn position(&self, marker: usize) -> Option<usize> {
        self.0.iter().position(|&m| m == marker)
    }

    pub fn is_subset_of(&self, other: &MarkerSet) -> bool {
        self.0.iter().all(|&m| other.contains(m))
    }

    /// Positions of this set's markers inside `superset`.
    pub fn positions_in(&self, superset: &MarkerSet) -> Result<Vec<usize>> {
        self.0
            .iter()
            .map(|&m| match superset.position(m) {
                Some(p) => Ok(p),
                None => bail!(Argument, "marker {m} not in {:?}", superset.0),
            })
            .collect()
    }

    /// Copy without `marker`, order preserved.
    pub fn without(&self, marker: usize) -> Self {
        Self(self.0.iter().copied().filter(|&m| m != marker).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorSide {
    Encoder,
    Decoder,
}

/// Lookup-table kernel generator: row `i` of the backing `[N, d_out·d_in·h·w]`
/// parameter is marker `i`'s flattened kernel.
#[derive(Clone, Debug)]
pub struct KernelGeneratorTable {
    pub side: GeneratorSide,
    pub kernel_dims: [usize; 4],
    pub vocab_len: usize,
    pub param: ParamId,
}

/// Assembled encoder kernel together with the markers it was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperKernel<T> {
    pub weights: Tensor<T>,
    pub source: MarkerSet,
}

impl KernelGeneratorTable {
    /// Registers a table with fan-in scaled Gaussian rows, std `1/sqrt(d_in·h·w)`.
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        side: GeneratorSide,
        kernel_dims: [usize; 4],
        vocab_len: usize,
        rng: &mut R,
    ) -> Self {
        let [_, d_in, h, w] = kernel_dims;
        let std = 1.0 / ((d_in * h * w) as f64).sqrt();
        let flat: usize = kernel_dims.iter().product();
        let param = store.normal(name, &[vocab_len, flat], std, rng);
        Self {
            side,
            kernel_dims,
            vocab_len,
            param,
        }
    }

    pub fn flat_len(&self) -> usize {
        self.kernel_dims.iter().product()
    }

    fn row<'a, T: Real>(&self, store: &'a ParamStore<T>, marker: usize) -> Result<&'a [T]> {
        if marker >= self.vocab_len {
            bail!(
                Vocabulary,
                "marker {marker} outside vocabulary of {}",
                self.vocab_len
            );
        }
        Ok(store.get(self.param).slab(marker))
    }

    fn row_grad_mut<'a, T: Real>(&self, grads: &'a mut Grads<T>, marker: usize) -> &'a mut [T] {
        grads.get_mut(self.param).slab_mut(marker)
    }

    /// Looks up and reshapes one marker's kernel to `[d_out, d_in, h, w]`.
    pub fn generate_kernel<T: Real>(&self, store: &ParamStore<T>, marker: usize) -> Result<Tensor<T>> {
        Tensor::new(&self.kernel_dims, self.row(store, marker)?.to_vec())
    }

    /// Concatenates the set's kernels along the input-channel axis.
    pub fn assemble_encoder_hyperkernel<T: Real>(
        &self,
        store: &ParamStore<T>,
        set: &MarkerSet,
    ) -> Result<HyperKernel<T>> {
        if set.is_empty() {
            bail!(Argument, "hyperkernel needs at least one marker");
        }
        let [d_out, d_in, h, w] = self.kernel_dims;
        let block = d_in * h * w;
        let rows = set
            .iter()
            .map(|m| self.row(store, m))
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(d_out * block * set.len());
        for o in 0..d_out {
            for r in &rows {
                data.extend_from_slice(&r[o * block..(o + 1) * block]);
            }
        }
        Ok(HyperKernel {
            weights: Tensor::new(&[d_out, set.len() * d_in, h, w], data)?,
            source: set.clone(),
        })
    }

    /// Routes the gradient of an assembled hyperkernel back to table rows.
    pub fn scatter_hyperkernel_grad<T: Real>(
        &self,
        set: &MarkerSet,
        dkernel: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<()> {
        let [d_out, d_in, h, w] = self.kernel_dims;
        let block = d_in * h * w;
        if dkernel.dims() != [d_out, set.len() * d_in, h, w] {
            bail!(Dimension, "hyperkernel gradient {:?}", dkernel.dims());
        }
        for (c, m) in set.iter().enumerate() {
            let row = self.row_grad_mut(grads, m);
            for o in 0..d_out {
                let src = &dkernel.data()[(o * set.len() + c) * block..][..block];
                for (g, &v) in row[o * block..(o + 1) * block].iter_mut().zip(src) {
                    *g += v;
                }
            }
        }
        Ok(())
    }

    /// `V = W ⊗ H_e^{set}`: one convolution over the stacked per-marker features.
    pub fn encoder_hyperconv<T: Real>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        set: &MarkerSet,
        spec: ConvSpec,
    ) -> Result<Tensor<T>> {
        let (c, _, _) = features.chw()?;
        if c != set.len() * self.kernel_dims[1] {
            bail!(
                Dimension,
                "{c} feature channels for {} markers of width {}",
                set.len(),
                self.kernel_dims[1]
            );
        }
        let hk = self.assemble_encoder_hyperkernel(store, set)?;
        conv2d(features, &hk.weights, spec)
    }

    /// Returns the feature gradient; kernel gradients go into the table rows.
    pub fn encoder_hyperconv_backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        set: &MarkerSet,
        spec: ConvSpec,
        dv: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let hk = self.assemble_encoder_hyperkernel(store, set)?;
        let (dw, dk) = conv2d_backward(features, &hk.weights, spec, dv)?;
        self.scatter_hyperkernel_grad(set, &dk, grads)?;
        Ok(dw)
    }

    /// `U = [Z ⊗ φ_d(j¹); …; Z ⊗ φ_d(j^C)]` stacked on a new leading axis.
    pub fn decoder_hyperconv<T: Real>(
        &self,
        store: &ParamStore<T>,
        latent: &Tensor<T>,
        set: &MarkerSet,
        spec: ConvSpec,
    ) -> Result<Tensor<T>> {
        if set.is_empty() {
            bail!(Argument, "decoder needs at least one target marker");
        }
        let (c, _, _) = latent.chw()?;
        if c != self.kernel_dims[1] {
            bail!(Dimension, "latent has {c} channels, kernels expect {}", self.kernel_dims[1]);
        }
        let slices = set
            .iter()
            .map(|m| conv2d(latent, &self.generate_kernel(store, m)?, spec))
            .collect::<Result<Vec<_>>>()?;
        let (d, h, w) = slices[0].chw()?;
        let data = slices.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new(&[set.len(), d, h, w], data)
    }

    /// Backward of a single marker slice of [`Self::decoder_hyperconv`].
    /// Returns the latent gradient contribution.
    pub fn decoder_slice_backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        latent: &Tensor<T>,
        marker: usize,
        spec: ConvSpec,
        du: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let k = self.generate_kernel(store, marker)?;
        let (dz, dk) = conv2d_backward(latent, &k, spec, du)?;
        for (g, &v) in self.row_grad_mut(grads, marker).iter_mut().zip(dk.data()) {
            *g += v;
        }
        Ok(dz)
    }

    /// Backward of [`Self::decoder_hyperconv`] for a full `[C_d, d_ms, H, W]` gradient.
    pub fn decoder_hyperconv_backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        latent: &Tensor<T>,
        set: &MarkerSet,
        spec: ConvSpec,
        du: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let [cd, d, h, w] = du.dims()[..] else {
            bail!(Dimension, "decoder gradient must be rank 4, got {:?}", du.dims());
        };
        if cd != set.len() {
            bail!(Dimension, "gradient for {cd} markers, set has {}", set.len());
        }
        let mut dz = Tensor::zeros(latent.dims());
        for (c, m) in set.iter().enumerate() {
            let slice = Tensor::new(&[d, h, w], du.slab(c).to_vec())?;
            dz.add_assign(&self.decoder_slice_backward(store, latent, m, spec, &slice, grads)?)?;
        }
        Ok(dz)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(dims: [usize; 4], n: usize, seed: u64) -> (ParamStore<f64>, KernelGeneratorTable) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = KernelGeneratorTable::register(&mut store, "enc", GeneratorSide::Encoder, dims, n, &mut rng);
        (store, t)
    }

    #[test]
    fn vocabulary_round_trip() {
        let v = MarkerVocabulary::new(&["CD3", "CD8", "DNA1"]).unwrap();
        for (i, n) in v.names().iter().enumerate() {
            assert_eq!(v.lookup(n).unwrap(), i);
            assert_eq!(v.name(i).unwrap(), n);
        }
        assert!(matches!(v.lookup("CD4"), Err(Error::Vocabulary(_))));
        assert!(MarkerVocabulary::new(&["a", "a"]).is_err());
    }

    #[test]
    fn marker_set_validation() {
        assert!(MarkerSet::new(vec![0, 2], 3).is_ok());
        assert!(matches!(MarkerSet::new(vec![3], 3), Err(Error::Vocabulary(_))));
        assert!(MarkerSet::new(vec![1, 1], 3).is_err());
    }

    #[test]
    fn zero_table_gives_zero_kernel() {
        let (mut store, t) = table([4, 2, 1, 1], 3, 1);
        store.get_mut(t.param).data_mut().fill(0.0);
        let k = t.generate_kernel(&store, 1).unwrap();
        assert!(k.data().iter().all(|&v| v == 0.0));
        assert!(matches!(t.generate_kernel(&store, 3), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn full_encoder_shapes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = KernelGeneratorTable::register(&mut store, "enc", GeneratorSide::Encoder, [192, 16, 1, 1], 4, &mut rng);
        assert_eq!(t.generate_kernel(&store, 0).unwrap().dims(), &[192, 16, 1, 1]);
        let set = MarkerSet::new(vec![0, 1, 2], 4).unwrap();
        let hk = t.assemble_encoder_hyperkernel(&store, &set).unwrap();
        assert_eq!(hk.weights.dims(), &[192, 48, 1, 1]);
        let a = t.generate_kernel(&store, 0).unwrap();
        let b = t.generate_kernel(&store, 1).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x != y));
    }

    #[test]
    fn single_marker_hyperkernel_is_the_generated_kernel() {
        let (store, t) = table([5, 3, 2, 2], 4, 2);
        let set = MarkerSet::new(vec![2], 4).unwrap();
        let hk = t.assemble_encoder_hyperkernel(&store, &set).unwrap();
        assert_eq!(hk.weights, t.generate_kernel(&store, 2).unwrap());
        let empty = MarkerSet::new(vec![], 4).unwrap();
        assert!(matches!(t.assemble_encoder_hyperkernel(&store, &empty), Err(Error::Argument(_))));
    }

    #[test]
    fn hyperkernel_blocks_follow_set_order() {
        let (store, t) = table([3, 2, 1, 1], 5, 3);
        let fwd = t.assemble_encoder_hyperkernel(&store, &MarkerSet::new(vec![1, 4, 0], 5).unwrap()).unwrap();
        let rev = t.assemble_encoder_hyperkernel(&store, &MarkerSet::new(vec![0, 1, 4], 5).unwrap()).unwrap();
        // block c of fwd corresponds to block perm[c] of rev
        let perm = [1, 2, 0];
        for o in 0..3 {
            for (c, &pc) in perm.iter().enumerate() {
                for i in 0..2 {
                    assert_eq!(fwd.weights.data()[o * 6 + c * 2 + i], rev.weights.data()[o * 6 + pc * 2 + i]);
                }
            }
        }
    }

    #[test]
    fn encoder_hyperconv_is_sum_of_block_convolutions() {
        let (store, t) = table([4, 3, 1, 1], 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set = MarkerSet::new(vec![5, 2], 6).unwrap();
        let w = Tensor::from_fn(&[6, 5, 5], |_| rng.random_range(-1.0..1.0));
        let v = t.encoder_hyperconv(&store, &w, &set, ConvSpec::default()).unwrap();
        let mut sum = Tensor::zeros(&[4, 5, 5]);
        for (c, m) in set.iter().enumerate() {
            let block = w.select(&[3 * c, 3 * c + 1, 3 * c + 2]).unwrap();
            let part = conv2d(&block, &t.generate_kernel(&store, m).unwrap(), ConvSpec::default()).unwrap();
            sum.add_assign(&part).unwrap();
        }
        for (a, b) in v.data().iter().zip(sum.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let bad = Tensor::zeros(&[5, 5, 5]);
        assert!(matches!(t.encoder_hyperconv(&store, &bad, &set, ConvSpec::default()), Err(Error::Dimension(_))));
    }

    #[test]
    fn encoder_gradient_only_touches_set_rows() {
        let (store, t) = table([4, 2, 1, 1], 6, 5);
        let set = MarkerSet::new(vec![3, 1], 6).unwrap();
        let w = Tensor::from_fn(&[4, 3, 3], |i| (i as f64 * 0.37).sin());
        let dv = Tensor::full(&[4, 3, 3], 1.0);
        let mut grads = Grads::zeros_like(&store);
        t.encoder_hyperconv_backward(&store, &w, &set, ConvSpec::default(), &dv, &mut grads).unwrap();
        let g = grads.get(t.param);
        for m in 0..6 {
            let nonzero = g.slab(m).iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, set.contains(m), "marker {m}");
        }
    }

    #[test]
    fn decoder_slices_are_independent() {
        let (mut store, t) = table([3, 4, 1, 1], 5, 6);
        let z = Tensor::from_fn(&[4, 3, 3], |i| (i as f64 * 0.11).cos());
        let set = MarkerSet::new(vec![0, 3, 4], 5).unwrap();
        let u = t.decoder_hyperconv(&store, &z, &set, ConvSpec::default()).unwrap();
        assert_eq!(u.dims(), &[3, 3, 3, 3]);
        let single = t.decoder_hyperconv(&store, &z, &MarkerSet::new(vec![3], 5).unwrap(), ConvSpec::default()).unwrap();
        assert_eq!(single.slab(0), u.slab(1));

        let perm = t.decoder_hyperconv(&store, &z, &MarkerSet::new(vec![4, 0, 3], 5).unwrap(), ConvSpec::default()).unwrap();
        assert_eq!(perm.slab(0), u.slab(2));
        assert_eq!(perm.slab(1), u.slab(0));
        assert_eq!(perm.slab(2), u.slab(1));

        store.get_mut(t.param).slab_mut(3).fill(0.0);
        let zeroed = t.decoder_hyperconv(&store, &z, &set, ConvSpec::default()).unwrap();
        assert_eq!(zeroed.slab(0), u.slab(0));
        assert_eq!(zeroed.slab(2), u.slab(2));
        assert!(zeroed.slab(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_decoder_shape() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = KernelGeneratorTable::register(&mut store, "dec", GeneratorSide::Decoder, [512, 768, 1, 1], 4, &mut rng);
        let z = Tensor::zeros(&[768, 16, 16]);
        let u = t.decoder_hyperconv(&store, &z, &MarkerSet::new(vec![0, 1, 2, 3], 4).unwrap(), ConvSpec::default()).unwrap();
        assert_eq!(u.dims(), &[4, 512, 16, 16]);
    }
}
