//! Synthetic multi-domain image benchmark.
//!
//! Every class is a fixed 16×16 template. A domain re-renders the templates
//! with its own contrast, brightness, texture and pixel noise.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const SUITE_MAGIC: &str = "ITTADS 1";
pub const IMAGE_SIDE: usize = 16;
pub const TEMPLATE_COUNT: usize = 4;
/// Peak amplitude of the additive texture.
pub const TEXTURE_AMPLITUDE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    pub brightness_shift: f64,
    pub contrast_scale: f64,
    pub noise_std: f64,
    pub texture_freq: f64,
    pub n_samples: usize,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.contrast_scale > 0.0) {
            return Err(Error::Config(format!(
                "domain {}: contrast_scale must be > 0",
                self.domain_id
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!(
                "domain {}: noise_std must be >= 0",
                self.domain_id
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::EmptyDomain(self.domain_id.clone()));
        }
        Ok(())
    }
}

/// The four built-in domains.
pub fn default_domain_specs() -> Vec<DomainSpec> {
    let spec = |id: &str, b: f64, c: f64, n: f64, t: f64| DomainSpec {
        domain_id: id.into(),
        brightness_shift: b,
        contrast_scale: c,
        noise_std: n,
        texture_freq: t,
        n_samples: 400,
    };
    vec![
        spec("d0", 0.0, 1.0, 0.3, 0.0),
        spec("d1", 0.1, 0.8, 0.3, 1.0),
        spec("d2", -0.1, 1.2, 0.3, 2.0),
        spec("d3", 0.35, 0.3, 0.3, 4.0),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub spec: DomainSpec,
    /// `[n × side²]`, row-major images.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images and labels of the given samples, in order.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Domains plus a source/target partition. Views made by
/// [`DomainSuite::leave_one_out`] share the underlying data.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSuite {
    pub class_count: usize,
    pub side: usize,
    domains: Arc<Vec<Domain>>,
    pub source_ids: Vec<String>,
    pub target_ids: Vec<String>,
}

/// Class `k` template on a `side × side` grid, values in {0, 1}.
pub fn template(k: usize, side: usize) -> Result<Vec<f64>> {
    if k >= TEMPLATE_COUNT {
        return Err(Error::Config(format!(
            "class {k} has no template (only {TEMPLATE_COUNT} available)"
        )));
    }
    let c = (side as f64 - 1.0) / 2.0;
    let radius = side as f64 * 0.3;
    let cell = (side / 4).max(1);
    let on = |r: usize, col: usize| -> bool {
        match k {
            0 => col % 4 < 2,
            1 => (r + col) % 4 < 2,
            2 => (r / cell + col / cell).is_multiple_of(2),
            _ => {
                let (dr, dc) = (r as f64 - c, col as f64 - c);
                (dr * dr + dc * dc).sqrt() <= radius
            }
        }
    };
    Ok((0..side * side)
        .map(|i| if on(i / side, i % side) { 1.0 } else { 0.0 })
        .collect())
}

/// Additive texture of a domain: a diagonal sinusoid, zero at frequency 0.
pub fn texture(freq: f64, side: usize) -> Vec<f64> {
    (0..side * side)
        .map(|i| {
            let (r, c) = ((i / side) as f64, (i % side) as f64);
            TEXTURE_AMPLITUDE
                * (2.0 * std::f64::consts::PI * freq * (r + 2.0 * c) / side as f64).sin()
        })
        .collect()
}

fn render(
    spec: &DomainSpec,
    templates: &[Vec<f64>],
    side: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Domain> {
    spec.validate()?;
    let classes = templates.len();
    let mut labels: Vec<usize> = (0..spec.n_samples).map(|i| i % classes).collect();
    labels.shuffle(rng);
    let tex = texture(spec.texture_freq, side);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let d = side * side;
    let mut data = Vec::with_capacity(spec.n_samples * d);
    for &y in &labels {
        for (p, t) in templates[y].iter().zip(&tex) {
            let mut v = spec.contrast_scale * p + spec.brightness_shift + t;
            if spec.noise_std > 0.0 {
                v += noise.sample(rng);
            }
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(Domain {
        spec: spec.clone(),
        images: Tensor::matrix(spec.n_samples, d, data)?,
        labels,
    })
}

/// Render every domain. All domains start out as sources.
pub fn generate_suite(class_count: usize, specs: &[DomainSpec], seed: u64) -> Result<DomainSuite> {
    if class_count < 2 {
        return Err(Error::Config(format!(
            "class_count must be >= 2, got {class_count}"
        )));
    }
    if specs.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 domains, got {}",
            specs.len()
        )));
    }
    let mut ids: Vec<&str> = specs.iter().map(|s| s.domain_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("domain ids must be unique".into()));
    }
    let side = IMAGE_SIDE;
    let templates = (0..class_count)
        .map(|k| template(k, side))
        .collect::<Result<Vec<_>>>()?;
    let domains = specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            render(s, &templates, side, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainSuite {
        class_count,
        side,
        source_ids: specs.iter().map(|s| s.domain_id.clone()).collect(),
        target_ids: Vec::new(),
        domains: Arc::new(domains),
    })
}

impl DomainSuite {
    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn domain_ids(&self) -> Vec<String> {
        self.domains
            .iter()
            .map(|d| d.spec.domain_id.clone())
            .collect()
    }

    pub fn domain(&self, id: &str) -> Result<&Domain> {
        self.domains
            .iter()
            .find(|d| d.spec.domain_id == id)
            .ok_or_else(|| Error::UnknownDomain(id.to_string()))
    }

    pub fn sources(&self) -> Result<Vec<&Domain>> {
        self.source_ids.iter().map(|id| self.domain(id)).collect()
    }

    pub fn targets(&self) -> Result<Vec<&Domain>> {
        self.target_ids.iter().map(|id| self.domain(id)).collect()
    }

    /// Sources are every domain except `held_out`, which becomes the target.
    pub fn leave_one_out(&self, held_out: &str) -> Result<Self> {
        self.domain(held_out)?;
        let mut view = self.clone();
        view.source_ids = self
            .domain_ids()
            .into_iter()
            .filter(|d| d != held_out)
            .collect();
        view.target_ids = vec![held_out.to_string()];
        Ok(view)
    }

    /// `source` alone is the source; every other domain is a target.
    pub fn single_source(&self, source: &str) -> Result<Self> {
        self.domain(source)?;
        let mut view = self.clone();
        view.source_ids = vec![source.to_string()];
        view.target_ids = self
            .domain_ids()
            .into_iter()
            .filter(|d| d != source)
            .collect();
        Ok(view)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = SuiteHeader {
            class_count: self.class_count,
            side: self.side,
            little_endian: true,
            domains: self
                .domains
                .iter()
                .map(|d| HeaderDomain {
                    spec: d.spec.clone(),
                    count: d.len(),
                })
                .collect(),
            source_ids: self.source_ids.clone(),
            target_ids: self.target_ids.clone(),
        };
        writeln!(w, "{SUITE_MAGIC}")?;
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for d in self.domains.iter() {
            for v in d.images.data() {
                w.write_all(&v.to_le_bytes())?;
            }
            for &y in &d.labels {
                w.write_all(&(y as i32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end_matches('\n') != SUITE_MAGIC {
            return Err(Error::Format {
                expected: SUITE_MAGIC.into(),
                found: line.trim_end().chars().take(32).collect(),
            });
        }
        line.clear();
        r.read_line(&mut line)?;
        if !line.ends_with('\n') {
            return Err(truncated("JSON header line"));
        }
        let header: SuiteHeader = serde_json::from_str(line.trim_end())?;
        if !header.little_endian {
            return Err(Error::Format {
                expected: "little-endian payload".into(),
                found: "big-endian payload flag".into(),
            });
        }
        let d = header.side * header.side;
        let mut domains = Vec::with_capacity(header.domains.len());
        for hd in header.domains {
            let mut img = vec![0u8; hd.count * d * 8];
            r.read_exact(&mut img)
                .map_err(|_| truncated(&format!("images of domain {}", hd.spec.domain_id)))?;
            let mut lab = vec![0u8; hd.count * 4];
            r.read_exact(&mut lab)
                .map_err(|_| truncated(&format!("labels of domain {}", hd.spec.domain_id)))?;
            let data = img
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let labels = lab
                .chunks_exact(4)
                .map(|c| {
                    let y = i32::from_le_bytes(c.try_into().expect("4 bytes"));
                    if y < 0 || y as usize >= header.class_count {
                        Err(Error::LabelOutOfRange {
                            label: y.max(0) as usize,
                            classes: header.class_count,
                        })
                    } else {
                        Ok(y as usize)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            domains.push(Domain {
                spec: hd.spec,
                images: Tensor::matrix(hd.count, d, data)?,
                labels,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format {
                expected: "end of file".into(),
                found: "trailing bytes".into(),
            });
        }
        Ok(Self {
            class_count: header.class_count,
            side: header.side,
            domains: Arc::new(domains),
            source_ids: header.source_ids,
            target_ids: header.target_ids,
        })
    }
}

fn truncated(what: &str) -> Error {
    Error::Format {
        expected: what.to_string(),
        found: "truncated file".into(),
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderDomain {
    spec: DomainSpec,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct SuiteHeader {
    class_count: usize,
    side: usize,
    little_endian: bool,
    domains: Vec<HeaderDomain>,
    source_ids: Vec<String>,
    target_ids: Vec<String>,
}

/// Train/validation indices of one source domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainSplit {
    pub domain_id: String,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub domains: Vec<DomainSplit>,
}

impl Split {
    /// Shuffle every source domain with `seed` and hold out
    /// `round(n · val_fraction)` samples for validation.
    pub fn new(suite: &DomainSuite, val_fraction: f64, seed: u64) -> Result<Self> {
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must be in (0, 1), got {val_fraction}"
            )));
        }
        if suite.source_ids.is_empty() {
            return Err(Error::Config("suite has no source domain".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut domains = Vec::new();
        for d in suite.sources()? {
            if d.is_empty() {
                return Err(Error::EmptyDomain(d.spec.domain_id.clone()));
            }
            let mut idx: Vec<usize> = (0..d.len()).collect();
            idx.shuffle(&mut rng);
            let n_val =
                ((d.len() as f64 * val_fraction).round() as usize).clamp(1, d.len().max(2) - 1);
            let val = idx[..n_val].to_vec();
            let train = idx[n_val..].to_vec();
            domains.push(DomainSplit {
                domain_id: d.spec.domain_id.clone(),
                train,
                val,
            });
        }
        Ok(Self { domains })
    }

    /// All training samples as `(domain position, sample index)`.
    pub fn train_pool(&self) -> Vec<(usize, usize)> {
        self.pool(|d| &d.train)
    }

    pub fn val_pool(&self) -> Vec<(usize, usize)> {
        self.pool(|d| &d.val)
    }

    fn pool(&self, pick: impl Fn(&DomainSplit) -> &Vec<usize>) -> Vec<(usize, usize)> {
        self.domains
            .iter()
            .enumerate()
            .flat_map(|(k, d)| pick(d).iter().map(move |&i| (k, i)))
            .collect()
    }

    /// Gather a batch from `(domain position, sample index)` pairs.
    pub fn gather(
        &self,
        suite: &DomainSuite,
        items: &[(usize, usize)],
    ) -> Result<(Tensor, Vec<usize>)> {
        let doms = self
            .domains
            .iter()
            .map(|d| suite.domain(&d.domain_id))
            .collect::<Result<Vec<_>>>()?;
        let d = suite.side * suite.side;
        let mut data = Vec::with_capacity(items.len() * d);
        let mut labels = Vec::with_capacity(items.len());
        for &(k, i) in items {
            data.extend_from_slice(doms[k].images.row(i));
            labels.push(doms[k].labels[i]);
        }
        Ok((Tensor::matrix(items.len(), d, data)?, labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_spec(id: &str, n: usize) -> DomainSpec {
        DomainSpec {
            domain_id: id.into(),
            brightness_shift: 0.0,
            contrast_scale: 1.0,
            noise_std: 0.0,
            texture_freq: 0.0,
            n_samples: n,
        }
    }

    #[test]
    fn identity_domain_renders_raw_templates() {
        let suite = generate_suite(4, &[identity_spec("a", 20), identity_spec("b", 8)], 1).unwrap();
        let d = suite.domain("a").unwrap();
        for i in 0..d.len() {
            assert_eq!(
                d.images.row(i),
                template(d.labels[i], 16).unwrap().as_slice()
            );
        }
    }

    #[test]
    fn templates_are_distinct_and_bounded() {
        let t: Vec<Vec<f64>> = (0..4).map(|k| template(k, 16).unwrap()).collect();
        for a in 0..4 {
            for b in a + 1..4 {
                assert_ne!(t[a], t[b]);
            }
        }
        assert!(template(4, 16).is_err());
        assert!(generate_suite(5, &default_domain_specs(), 0).is_err());
        assert!(generate_suite(1, &default_domain_specs(), 0).is_err());
        assert!(generate_suite(4, &default_domain_specs()[..1], 0).is_err());
    }

    #[test]
    fn brightness_shifts_the_mean() {
        // contrast 0.5 keeps pixels in [0.1, 0.9] so nothing clips
        let mut a = identity_spec("a", 40);
        a.contrast_scale = 0.5;
        a.brightness_shift = 0.1;
        let mut b = a.clone();
        b.domain_id = "b".into();
        b.brightness_shift = 0.4;
        let suite = generate_suite(4, &[a, b], 3).unwrap();
        let mean = |id: &str| {
            let d = suite.domain(id).unwrap();
            d.images.data().iter().sum::<f64>() / d.images.numel() as f64
        };
        let class_mean = |id: &str, k: usize| {
            let d = suite.domain(id).unwrap();
            let rows: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == k).collect();
            rows.iter()
                .map(|&i| d.images.row(i).iter().sum::<f64>())
                .sum::<f64>()
                / (rows.len() * 256) as f64
        };
        for k in 0..4 {
            assert!((class_mean("b", k) - class_mean("a", k) - 0.3).abs() < 1e-12);
        }
        assert!((mean("b") - mean("a") - 0.3).abs() < 1e-9);
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let specs = default_domain_specs();
        let a = generate_suite(4, &specs, 11).unwrap();
        let b = generate_suite(4, &specs, 11).unwrap();
        let c = generate_suite(4, &specs, 12).unwrap();
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        a.write_to(&mut ba).unwrap();
        b.write_to(&mut bb).unwrap();
        assert_eq!(ba, bb);
        assert_ne!(a, c);
        for d in a.domains() {
            assert!(d.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for k in 0..4 {
                let n = d.labels.iter().filter(|&&y| y == k).count() as f64;
                assert!((n - d.len() as f64 / 4.0).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn leave_one_out_partitions() {
        let suite = generate_suite(4, &default_domain_specs(), 0).unwrap();
        let mut seen = Vec::new();
        for id in suite.domain_ids() {
            let v = suite.leave_one_out(&id).unwrap();
            assert_eq!(v.source_ids.len(), 3);
            assert_eq!(v.target_ids, vec![id.clone()]);
            assert!(!v.source_ids.contains(&id));
            seen.extend(v.target_ids);
        }
        assert_eq!(seen, suite.domain_ids());
        let single = suite.single_source("d0").unwrap();
        assert_eq!(single.source_ids, vec!["d0".to_string()]);
        assert_eq!(single.target_ids.len(), 3);
        assert!(matches!(
            suite.leave_one_out("nope"),
            Err(Error::UnknownDomain(_))
        ));
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("suite.bin");
        let suite = generate_suite(4, &default_domain_specs(), 5)
            .unwrap()
            .leave_one_out("d2")
            .unwrap();
        suite.save(&path).unwrap();
        let back = DomainSuite::load(&path).unwrap();
        assert_eq!(back, suite);

        let bytes = std::fs::read(&path).unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 12] {
            assert!(
                DomainSuite::read_from(&bytes[..cut]).is_err(),
                "cut at {cut}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(DomainSuite::read_from(extra.as_slice()).is_err());

        let text = String::from_utf8_lossy(&bytes[..200]).to_string();
        assert!(text.starts_with("ITTADS 1\n"));
        let flipped = {
            let s =
                std::str::from_utf8(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap() + 1])
                    .unwrap()
                    .len();
            let hdr_end = s + bytes[s..].iter().position(|&b| b == b'\n').unwrap();
            let hdr = std::str::from_utf8(&bytes[s..hdr_end])
                .unwrap()
                .replace("\"little_endian\":true", "\"little_endian\":false");
            let mut out = bytes[..s].to_vec();
            out.extend_from_slice(hdr.as_bytes());
            out.extend_from_slice(&bytes[hdr_end..]);
            out
        };
        let err = DomainSuite::read_from(flipped.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");

        let mut bad = bytes.clone();
        bad[7] = b'2';
        let err = DomainSuite::read_from(bad.as_slice()).unwrap_err();
        assert!(err.to_string().contains("ITTADS 1"), "{err}");
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let suite = generate_suite(4, &default_domain_specs(), 0)
            .unwrap()
            .leave_one_out("d0")
            .unwrap();
        let a = Split::new(&suite, 0.2, 9).unwrap();
        let b = Split::new(&suite, 0.2, 9).unwrap();
        let c = Split::new(&suite, 0.2, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for ds in &a.domains {
            let n = ds.train.len() + ds.val.len();
            assert!((ds.val.len() as f64 - 0.2 * n as f64).abs() <= 1.0);
            let mut all: Vec<usize> = ds.train.iter().chain(&ds.val).copied().collect();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), n);
        }
        assert!(Split::new(&suite, 1.0, 0).is_err());
        let (x, y) = a.gather(&suite, &a.val_pool()[..5]).unwrap();
        assert_eq!(x.shape(), &[5, 256]);
        assert_eq!(y.len(), 5);
    }
}
