//! Low-rank adapters on named linear layers.
//!
//! An adapter contributes `alpha·B·A` to a frozen weight `W`. Freshly created
//! adapters have `B = 0` so the adapted model starts out identical to its base,
//! while a Gaussian `A` keeps the gradient with respect to `B` non-zero.
//!
//! Adapter values are held in `f32`, the precision of the `TFLORA01` file
//! format, so saving and loading is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{Linear, LoraWeights, Param, Scalar};

pub const MAGIC: &[u8; 8] = b"TFLORA01";

/// A model whose linear layers can be addressed by stable names.
pub trait LoraHost<S: Scalar> {
    fn linear_layers(&self) -> Vec<(String, &Linear<S>)>;
    fn linear_layers_mut(&mut self) -> Vec<(String, &mut Linear<S>)>;
    /// Layers that receive adapters unless told otherwise.
    fn default_lora_targets(&self) -> Vec<String>;

    fn linear(&self, name: &str) -> Option<&Linear<S>> {
        self.linear_layers().into_iter().find(|(n, _)| n == name).map(|(_, l)| l)
    }

    fn linear_mut(&mut self, name: &str) -> Option<&mut Linear<S>> {
        self.linear_layers_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, l)| l)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub alpha: f32,
    /// `rank × in_dim`, row-major.
    pub a: Vec<f32>,
    /// `out_dim × rank`, row-major.
    pub b: Vec<f32>,
}

impl LoraAdapter {
    pub fn new(rank: usize, in_dim: usize, out_dim: usize, alpha: f32, a: Vec<f32>, b: Vec<f32>) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("adapter rank must be at least 1"));
        }
        if a.len() != rank * in_dim || b.len() != out_dim * rank {
            return Err(Error::shape(format!(
                "adapter A {} / B {} values for rank {rank}, {out_dim}x{in_dim}",
                a.len(),
                b.len()
            )));
        }
        Ok(Self {
            rank,
            in_dim,
            out_dim,
            alpha,
            a,
            b,
        })
    }

    /// `alpha·B·A` as an `out_dim × in_dim` matrix, accumulated in f64.
    pub fn delta(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.out_dim * self.in_dim];
        for o in 0..self.out_dim {
            for r in 0..self.rank {
                let b = self.b[o * self.rank + r] as f64 * self.alpha as f64;
                if b == 0.0 {
                    continue;
                }
                let arow = &self.a[r * self.in_dim..(r + 1) * self.in_dim];
                for (i, &a) in arow.iter().enumerate() {
                    d[o * self.in_dim + i] += b * a as f64;
                }
            }
        }
        d
    }

    fn to_weights<S: Scalar>(&self) -> LoraWeights<S> {
        let conv = |v: &[f32]| v.iter().map(|&x| S::lit(x as f64)).collect();
        LoraWeights {
            a: Param::from_vec(&[self.rank, self.in_dim], conv(&self.a)),
            b: Param::from_vec(&[self.out_dim, self.rank], conv(&self.b)),
            alpha: S::lit(self.alpha as f64),
        }
    }

    fn from_weights<S: Scalar>(w: &LoraWeights<S>) -> Self {
        let conv = |v: &[S]| v.iter().map(|x| x.as_f64() as f32).collect();
        Self {
            rank: w.rank(),
            in_dim: w.a.shape[1],
            out_dim: w.b.shape[0],
            alpha: w.alpha.as_f64() as f32,
            a: conv(&w.a.value),
            b: conv(&w.b.value),
        }
    }

    /// Stack two adapters into one whose delta is the sum of both deltas.
    fn stacked(&self, other: &LoraAdapter) -> LoraAdapter {
        let mut out = LoraAdapter {
            rank: 0,
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            alpha: 1.0,
            a: Vec::new(),
            b: Vec::new(),
        };
        out.push_scaled(self, 1.0);
        out.push_scaled(other, 1.0);
        out
    }

    /// Append `weight·alpha·B·A` as extra rank, folding the scale into B.
    fn push_scaled(&mut self, src: &LoraAdapter, weight: f64) {
        let new_rank = self.rank + src.rank;
        let scale = (weight * src.alpha as f64 / self.alpha as f64) as f32;
        let mut b = Vec::with_capacity(self.out_dim * new_rank);
        for o in 0..self.out_dim {
            b.extend_from_slice(&self.b[o * self.rank..(o + 1) * self.rank]);
            b.extend(src.b[o * src.rank..(o + 1) * src.rank].iter().map(|&v| v * scale));
        }
        self.a.extend_from_slice(&src.a);
        self.b = b;
        self.rank = new_rank;
    }
}

/// Adapters keyed by layer name plus free-form metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterSet {
    pub adapters: BTreeMap<String, LoraAdapter>,
    pub metadata: BTreeMap<String, String>,
}

impl AdapterSet {
    /// Fresh adapters (`A` Gaussian with std `1/√in_dim`, `B = 0`) on the named layers.
    pub fn init<S: Scalar, H: LoraHost<S> + ?Sized, R: Rng + ?Sized>(
        host: &H,
        targets: &[String],
        rank: usize,
        alpha: f32,
        rng: &mut R,
    ) -> Result<Self> {
        let mut set = AdapterSet::default();
        for name in targets {
            let layer = host.linear(name).ok_or_else(|| Error::UnknownLayer(name.clone()))?;
            let (inp, out) = (layer.in_dim(), layer.out_dim());
            let std = 1.0 / (inp as f64).sqrt();
            let a = (0..rank * inp)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    (z * std) as f32
                })
                .collect();
            set.adapters
                .insert(name.clone(), LoraAdapter::new(rank, inp, out, alpha, a, vec![0.0; out * rank])?);
        }
        Ok(set)
    }

    /// Read the adapters currently attached to `host`.
    pub fn extract<S: Scalar, H: LoraHost<S> + ?Sized>(host: &H) -> Self {
        let mut set = AdapterSet::default();
        for (name, layer) in host.linear_layers() {
            if let Some(l) = &layer.lora {
                set.adapters.insert(name, LoraAdapter::from_weights(l));
            }
        }
        set
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    /// Adapters whose layer name starts with `prefix.`.
    pub fn restricted_to(&self, prefix: &str) -> AdapterSet {
        let p = format!("{prefix}.");
        AdapterSet {
            adapters: self
                .adapters
                .iter()
                .filter(|(k, _)| k.starts_with(&p))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            metadata: self.metadata.clone(),
        }
    }

    fn check_host<S: Scalar, H: LoraHost<S> + ?Sized>(&self, host: &H) -> Result<()> {
        for (name, ad) in &self.adapters {
            let layer = host.linear(name).ok_or_else(|| Error::UnknownLayer(name.clone()))?;
            if layer.in_dim() != ad.in_dim || layer.out_dim() != ad.out_dim {
                return Err(Error::shape(format!(
                    "{name}: layer is {}x{}, adapter is {}x{}",
                    layer.out_dim(),
                    layer.in_dim(),
                    ad.out_dim,
                    ad.in_dim
                )));
            }
        }
        Ok(())
    }
}

/// Attach `set` to `host` in place.
///
/// Adapted layers compute `(W + alpha·B·A)·x`; their base weight and bias are
/// frozen and A, B are left trainable. A layer that already carries an adapter
/// gets the new one stacked next to it, so both deltas apply.
pub fn attach<S: Scalar, H: LoraHost<S> + ?Sized>(host: &mut H, set: &AdapterSet) -> Result<()> {
    set.check_host(host)?;
    for (name, ad) in &set.adapters {
        let layer = host.linear_mut(name).expect("checked above");
        let combined = match &layer.lora {
            Some(existing) => LoraAdapter::from_weights(existing).stacked(ad),
            None => ad.clone(),
        };
        layer.lora = Some(combined.to_weights());
        layer.weight.frozen = true;
        layer.bias.frozen = true;
    }
    Ok(())
}

/// Adapted copy of `host`.
pub fn inject<S: Scalar, H: LoraHost<S> + Clone>(host: &H, set: &AdapterSet) -> Result<H> {
    let mut out = host.clone();
    attach(&mut out, set)?;
    Ok(out)
}

/// Fold `set` into the stored weights in place: `W ← W + alpha·B·A`.
pub fn merge_into<S: Scalar, H: LoraHost<S> + ?Sized>(host: &mut H, set: &AdapterSet) -> Result<()> {
    set.check_host(host)?;
    for (name, ad) in &set.adapters {
        let layer = host.linear_mut(name).expect("checked above");
        for (w, d) in layer.weight.value.iter_mut().zip(ad.delta()) {
            if d != 0.0 {
                *w = S::lit(w.as_f64() + d);
            }
        }
    }
    Ok(())
}

/// Standalone copy of `host` with `set` merged into its weights.
pub fn merge<S: Scalar, H: LoraHost<S> + Clone>(host: &H, set: &AdapterSet) -> Result<H> {
    let mut out = host.clone();
    merge_into(&mut out, set)?;
    Ok(out)
}

/// Weighted combination: per layer the effective delta is `Σ wᵢ·alphaᵢ·Bᵢ·Aᵢ`.
///
/// Implemented by stacking ranks with `wᵢ·alphaᵢ` folded into each `Bᵢ`;
/// the result has `alpha = 1`. Layers present in only some sets are kept.
pub fn fuse(sets: &[AdapterSet], weights: &[f64]) -> Result<AdapterSet> {
    if sets.is_empty() {
        return Err(Error::invalid("nothing to fuse"));
    }
    if sets.len() != weights.len() {
        return Err(Error::invalid(format!("{} adapter sets but {} weights", sets.len(), weights.len())));
    }
    let mut out = AdapterSet::default();
    for (i, (set, &w)) in sets.iter().zip(weights).enumerate() {
        for (name, ad) in &set.adapters {
            let entry = out.adapters.entry(name.clone()).or_insert_with(|| LoraAdapter {
                rank: 0,
                in_dim: ad.in_dim,
                out_dim: ad.out_dim,
                alpha: 1.0,
                a: Vec::new(),
                b: Vec::new(),
            });
            if entry.in_dim != ad.in_dim || entry.out_dim != ad.out_dim {
                return Err(Error::shape(format!("{name}: incompatible adapter dims in set {i}")));
            }
            entry.push_scaled(ad, w);
        }
    }
    out.metadata.insert("fused_from".into(), sets.len().to_string());
    out.metadata.insert(
        "fuse_weights".into(),
        weights.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
    );
    Ok(out)
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_matrix(buf: &mut Vec<u8>, rows: usize, cols: usize, data: &[f32]) {
    put_u32(buf, rows);
    put_u32(buf, cols);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(set: &AdapterSet) -> Result<Vec<u8>> {
    let mut meta = String::new();
    for (k, v) in &set.metadata {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::invalid(format!("metadata entry {k:?}={v:?} cannot be stored")));
        }
        meta.push_str(&format!("{k}={v}\n"));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, meta.len());
    buf.extend_from_slice(meta.as_bytes());
    put_u32(&mut buf, set.adapters.len());
    for (name, ad) in &set.adapters {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, ad.rank);
        buf.extend_from_slice(&ad.alpha.to_le_bytes());
        put_matrix(&mut buf, ad.rank, ad.in_dim, &ad.a);
        put_matrix(&mut buf, ad.out_dim, ad.rank, &ad.b);
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32(&mut self) -> std::result::Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("size overflow")?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn parse(buf: &[u8]) -> std::result::Result<AdapterSet, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let meta_len = r.u32()?;
    let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| "metadata is not UTF-8")?;
    let mut metadata = BTreeMap::new();
    for line in meta.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| format!("metadata line {line:?}"))?;
        metadata.insert(k.to_string(), v.to_string());
    }
    let count = r.u32()?;
    let mut adapters = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| "layer name is not UTF-8")?
            .to_string();
        let rank = r.u32()?;
        let alpha = r.f32()?;
        let (ar, ac) = (r.u32()?, r.u32()?);
        let a = r.floats(ar.checked_mul(ac).ok_or("size overflow")?)?;
        let (br, bc) = (r.u32()?, r.u32()?);
        let b = r.floats(br.checked_mul(bc).ok_or("size overflow")?)?;
        if ar != rank || bc != rank {
            return Err(format!("{name}: rank {rank} but A is {ar}x{ac}, B is {br}x{bc}"));
        }
        let ad = LoraAdapter::new(rank, ac, br, alpha, a, b).map_err(|e| e.to_string())?;
        if adapters.insert(name.clone(), ad).is_some() {
            return Err(format!("duplicate layer {name}"));
        }
    }
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    Ok(AdapterSet { adapters, metadata })
}

pub fn from_bytes(buf: &[u8], path: &Path) -> Result<AdapterSet> {
    parse(buf).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn save_adapters(set: &AdapterSet, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(set)?)?;
    Ok(())
}

pub fn load_adapters(path: &Path) -> Result<AdapterSet> {
    from_bytes(&fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[derive(Clone)]
    struct OneLayer(Linear<f64>);

    impl LoraHost<f64> for OneLayer {
        fn linear_layers(&self) -> Vec<(String, &Linear<f64>)> {
            vec![("m.l".into(), &self.0)]
        }
        fn linear_layers_mut(&mut self) -> Vec<(String, &mut Linear<f64>)> {
            vec![("m.l".into(), &mut self.0)]
        }
        fn default_lora_targets(&self) -> Vec<String> {
            vec!["m.l".into()]
        }
    }

    fn random_set(rng: &mut ChaCha8Rng, rank: usize, alpha: f32) -> AdapterSet {
        let mut s = AdapterSet::default();
        let a = (0..rank * 5).map(|_| rng.random::<f32>() - 0.5).collect();
        let b = (0..4 * rank).map(|_| rng.random::<f32>() - 0.5).collect();
        s.adapters.insert("m.l".into(), LoraAdapter::new(rank, 5, 4, alpha, a, b).unwrap());
        s
    }

    #[test]
    fn fuse_identity_and_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_set(&mut rng, 3, 0.7);
        let d = s.adapters["m.l"].delta();
        let one = fuse(std::slice::from_ref(&s), &[1.0]).unwrap();
        let two = fuse(&[s.clone(), s.clone()], &[0.5, 0.5]).unwrap();
        for f in [one, two] {
            let fd = f.adapters["m.l"].delta();
            assert_eq!(f.adapters["m.l"].alpha, 1.0);
            for (a, b) in fd.iter().zip(&d) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fuse_rejects_mismatches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_set(&mut rng, 2, 1.0);
        assert!(fuse(&[s.clone(), s.clone()], &[1.0]).is_err());
        let mut odd = AdapterSet::default();
        odd.adapters
            .insert("m.l".into(), LoraAdapter::new(1, 3, 4, 1.0, vec![0.0; 3], vec![0.0; 4]).unwrap());
        assert!(fuse(&[s, odd], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn attach_rejects_unknown_layer_and_bad_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let host = OneLayer(Linear::new(5, 4, &mut rng));
        let mut s = random_set(&mut rng, 2, 1.0);
        let ad = s.adapters.remove("m.l").unwrap();
        s.adapters.insert("m.nope".into(), ad);
        assert!(matches!(inject(&host, &s), Err(Error::UnknownLayer(_))));
        let mut bad = AdapterSet::default();
        bad.adapters
            .insert("m.l".into(), LoraAdapter::new(1, 6, 4, 1.0, vec![0.0; 6], vec![0.0; 4]).unwrap());
        assert!(matches!(inject(&host, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn stacking_on_attached_layer_sums_deltas() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let host = OneLayer(Linear::new(5, 4, &mut rng));
        let (s1, s2) = (random_set(&mut rng, 2, 0.5), random_set(&mut rng, 1, 2.0));
        let mut both = inject(&host, &s1).unwrap();
        attach(&mut both, &s2).unwrap();
        let eff = both.0.effective_weight();
        let (d1, d2) = (s1.adapters["m.l"].delta(), s2.adapters["m.l"].delta());
        for i in 0..eff.len() {
            assert!((eff[i] - (host.0.weight.value[i] + d1[i] + d2[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn corrupted_magic_and_truncation_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_set(&mut rng, 2, 1.0).with_meta("task", "color");
        let bytes = to_bytes(&s).unwrap();
        let p = Path::new("mem");
        assert_eq!(from_bytes(&bytes, p).unwrap(), s);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad, p).is_err());
        for cut in [4, 12, bytes.len() - 1] {
            assert!(from_bytes(&bytes[..cut], p).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra, p).is_err());
    }
}
