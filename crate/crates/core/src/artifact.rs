//! Versioned binary artifacts so training, pricing, and hedging can run as
//! separate invocations.
//!
//! Two file kinds share one encoding discipline: four magic bytes, a u32
//! schema version, a shape header, then payload. All integers are u64
//! little-endian unless noted; all floats are f64 little-endian. Readers are
//! bounds-checked and reject trailing bytes, so a truncated or corrupted
//! file fails loudly instead of yielding a plausible-looking tensor.

use std::path::Path;

use crate::basis::{BasisSpec, StateMapping};
use crate::dual::AlphaTensor;
use crate::error::{Error, Result};
use crate::primal::ExercisePolicy;

/// Magic bytes for hedge-coefficient files.
pub const ALPHA_MAGIC: [u8; 4] = *b"DHAF";
/// Magic bytes for exercise-policy files.
pub const POLICY_MAGIC: [u8; 4] = *b"DHPF";
/// Bumped on any change to either layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Trained hedge coefficients plus everything needed to apply them.
#[derive(Debug, Clone)]
pub struct AlphaArtifact {
    /// Seed of the training path set the coefficients came from.
    pub seed_train: u64,
    pub basis: BasisSpec,
    pub mapping: StateMapping,
    pub alpha: AlphaTensor,
}

/// Fitted exercise policy plus its training seed.
#[derive(Debug, Clone)]
pub struct PolicyArtifact {
    pub seed_train: u64,
    pub policy: ExercisePolicy,
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: [u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        Writer(buf)
    }

    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn raw_u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64_slice(&mut self, vs: &[f64]) {
        self.u64(vs.len());
        for &v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: [u8; 4], kind: &str) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let got = r.take(4)?;
        if got != magic {
            return Err(Error::config(format!("not a {kind} artifact (bad magic bytes)")));
        }
        let mut v = [0u8; 4];
        v.copy_from_slice(r.take(4)?);
        let version = u32::from_le_bytes(v);
        if version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "{kind} artifact has schema version {version}, expected {SCHEMA_VERSION}"
            )));
        }
        Ok(r)
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::config("artifact file is truncated"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn raw_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        b.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<usize> {
        usize::try_from(self.raw_u64()?)
            .map_err(|_| Error::config("artifact length field overflows usize"))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        b.copy_from_slice(self.take(8)?);
        Ok(f64::from_le_bytes(b))
    }

    /// Length-prefixed float vector; the byte take bounds the allocation.
    fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let len = self.u64()?;
        let bytes = len
            .checked_mul(8)
            .ok_or_else(|| Error::config("artifact length field overflows usize"))?;
        let raw = self.take(bytes)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::config(format!(
                "artifact has {} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn write_basis(w: &mut Writer, spec: &BasisSpec) {
    match spec {
        BasisSpec::LocalHypercube { p } => {
            w.0.push(0);
            w.u64(*p);
        }
        BasisSpec::LocalSignedPayoff { p } => {
            w.0.push(1);
            w.u64(*p);
        }
        BasisSpec::Polynomial { eta } => {
            w.0.push(2);
            w.u64(*eta);
        }
    }
}

fn read_basis(r: &mut Reader) -> Result<BasisSpec> {
    let tag = r.u8()?;
    let param = r.u64()?;
    match tag {
        0 => Ok(BasisSpec::LocalHypercube { p: param }),
        1 => Ok(BasisSpec::LocalSignedPayoff { p: param }),
        2 => Ok(BasisSpec::Polynomial { eta: param }),
        other => Err(Error::config(format!("unknown basis tag {other} in artifact"))),
    }
}

fn write_mapping(w: &mut Writer, mapping: &StateMapping) {
    match mapping {
        StateMapping::LocalAsset { p, d, rows } => {
            w.0.push(0);
            w.u64(*p);
            w.u64(*d);
            w.f64_slice(rows);
        }
        StateMapping::SignedPayoff { p, strike, weights, rows } => {
            w.0.push(1);
            w.u64(*p);
            w.f64(*strike);
            w.f64_slice(weights);
            w.f64_slice(rows);
        }
        StateMapping::PolyBounds { exponents, d, rows } => {
            w.0.push(2);
            w.u64(*d);
            w.u64(exponents.len());
            for row in exponents {
                w.0.extend_from_slice(row);
            }
            w.f64_slice(rows);
        }
    }
}

fn read_mapping(r: &mut Reader) -> Result<StateMapping> {
    match r.u8()? {
        0 => {
            let p = r.u64()?;
            let d = r.u64()?;
            Ok(StateMapping::LocalAsset { p, d, rows: r.f64_vec()? })
        }
        1 => {
            let p = r.u64()?;
            let strike = r.f64()?;
            let weights = r.f64_vec()?;
            Ok(StateMapping::SignedPayoff { p, strike, weights, rows: r.f64_vec()? })
        }
        2 => {
            let d = r.u64()?;
            let count = r.u64()?;
            let mut exponents = Vec::with_capacity(count.min(1 << 20));
            for _ in 0..count {
                exponents.push(r.take(d)?.to_vec());
            }
            Ok(StateMapping::PolyBounds { exponents, d, rows: r.f64_vec()? })
        }
        other => Err(Error::config(format!("unknown mapping tag {other} in artifact"))),
    }
}

impl AlphaArtifact {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(ALPHA_MAGIC);
        w.raw_u64(self.seed_train);
        let a = &self.alpha;
        w.u64(a.n);
        w.u64(a.nbar);
        w.u64(a.pbar);
        w.u64(a.dbar);
        write_basis(&mut w, &self.basis);
        write_mapping(&mut w, &self.mapping);
        w.f64_slice(&a.a);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, ALPHA_MAGIC, "hedge-coefficient")?;
        let seed_train = r.raw_u64()?;
        let n = r.u64()?;
        let nbar = r.u64()?;
        let pbar = r.u64()?;
        let dbar = r.u64()?;
        let basis = read_basis(&mut r)?;
        let mapping = read_mapping(&mut r)?;
        let values = r.f64_vec()?;
        r.done()?;
        let want = n
            .checked_mul(nbar)
            .and_then(|x| x.checked_mul(pbar))
            .and_then(|x| x.checked_mul(dbar))
            .ok_or_else(|| Error::config("artifact shape header overflows usize"))?;
        if values.len() != want {
            return Err(Error::config(format!(
                "artifact holds {} coefficients but the shape header implies {want}",
                values.len()
            )));
        }
        Ok(AlphaArtifact {
            seed_train,
            basis,
            mapping,
            alpha: AlphaTensor { n, nbar, pbar, dbar, a: values },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl PolicyArtifact {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(POLICY_MAGIC);
        w.raw_u64(self.seed_train);
        let p = &self.policy;
        w.u64(p.degree);
        w.u64(p.n);
        w.u64(p.d);
        write_basis(&mut w, &p.features.spec);
        write_mapping(&mut w, &p.features.mapping);
        w.f64_slice(&p.coeffs);
        w.f64(p.c0);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, POLICY_MAGIC, "exercise-policy")?;
        let seed_train = r.raw_u64()?;
        let degree = r.u64()?;
        let n = r.u64()?;
        let d = r.u64()?;
        let spec = read_basis(&mut r)?;
        let mapping = read_mapping(&mut r)?;
        let coeffs = r.f64_vec()?;
        let c0 = r.f64()?;
        r.done()?;
        let features = crate::basis::BasisEvaluator::new(spec, mapping, d);
        if n == 0 || coeffs.len() != (n - 1) * features.pbar {
            return Err(Error::config(format!(
                "policy artifact holds {} coefficients but the shape header implies {}",
                coeffs.len(),
                n.saturating_sub(1) * features.pbar
            )));
        }
        Ok(PolicyArtifact {
            seed_train,
            policy: ExercisePolicy { degree, n, d, features, coeffs, c0 },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
