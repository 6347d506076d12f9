//! Flow checkpoint format (little-endian):
//!
//! ```text
//! "SFMF" | version u32 = 1 | d u32 | n_gamma u32 | layers u32
//! | hidden count u32, widths u32 * count | log-scale bound f64
//! | n_u u32 | basis family u8 | m u32 | dt f64 | integer state u8
//! | x-box (len u32, lo, hi) | system name (len u32, UTF-8)
//! | context shift, context scale (f64 * (d + n_gamma) each)
//! | target shift, target scale (f64 * d each)
//! | parameter count u64 | parameters f64 * count
//! ```
//!
//! Parameters are always stored as f64, so `f32` models round-trip exactly.

use std::fs;
use std::path::Path;

use super::{FlowConfig, FlowModel, ModelMeta};
use crate::codec::{Reader, Writer};
use crate::dataset::NormStats;
use crate::error::{Error, Result};
use crate::excitation::BasisFamily;
use crate::scalar::Scalar;

pub const FLOW_MAGIC: &[u8; 4] = b"SFMF";
pub const FLOW_VERSION: u32 = 1;

fn write_vec<S: Scalar>(w: &mut Writer, v: &[S]) {
    for x in v {
        w.f64(x.to_f64_lossy());
    }
}

fn read_vec<S: Scalar>(r: &mut Reader<'_>, n: usize) -> Result<Vec<S>> {
    Ok(r.f64s(n)?.into_iter().map(S::of).collect())
}

impl<S: Scalar> FlowModel<S> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        self.write_into(&mut w);
        w.0
    }

    pub(crate) fn write_into(&self, w: &mut Writer) {
        let c = &self.config;
        let m = &self.meta;
        w.bytes(FLOW_MAGIC);
        w.u32(FLOW_VERSION);
        w.u32(c.d as u32);
        w.u32(c.n_gamma as u32);
        w.u32(c.layers as u32);
        w.u32(c.hidden.len() as u32);
        for &h in &c.hidden {
            w.u32(h as u32);
        }
        w.f64(c.log_scale_bound);
        w.u32(m.n_u as u32);
        w.u8(m.basis_family.code());
        w.u32(m.m as u32);
        w.f64(m.dt);
        w.u8(m.integer_state as u8);
        w.opt_box(m.x_box.as_ref());
        w.string(&m.system);
        write_vec(w, &self.norm.ctx_shift);
        write_vec(w, &self.norm.ctx_scale);
        write_vec(w, &self.norm.target_shift);
        write_vec(w, &self.norm.target_scale);
        w.u64(self.params.len() as u64);
        write_vec(w, &self.params);
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let model = Self::read_from(&mut r)?;
        if r.pos as usize != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after parameters"));
        }
        Ok(model)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        r.magic(FLOW_MAGIC)?;
        r.version(FLOW_VERSION)?;
        let header_at = r.pos;
        let d = r.u32()? as usize;
        let n_gamma = r.u32()? as usize;
        let layers = r.u32()? as usize;
        let n_hidden = r.u32()? as usize;
        if n_hidden > 64 {
            return Err(Error::format(
                r.pos - 4,
                format!("implausible hidden count {n_hidden}"),
            ));
        }
        let hidden = (0..n_hidden)
            .map(|_| r.u32().map(|h| h as usize))
            .collect::<Result<Vec<_>>>()?;
        let log_scale_bound = r.f64()?;
        let n_u = r.u32()? as usize;
        let at = r.pos;
        let basis_family =
            BasisFamily::from_code(r.u8()?).ok_or_else(|| Error::format(at, "unknown basis family code"))?;
        let m = r.u32()? as usize;
        let dt = r.f64()?;
        let integer_state = r.u8()? != 0;
        let x_box = r.opt_box()?;
        let system = r.string()?;
        let norm = NormStats {
            ctx_shift: read_vec(r, d + n_gamma)?,
            ctx_scale: read_vec(r, d + n_gamma)?,
            target_shift: read_vec(r, d)?,
            target_scale: read_vec(r, d)?,
        };
        let config = FlowConfig {
            d,
            n_gamma,
            layers,
            hidden,
            log_scale_bound,
        };
        let meta = ModelMeta {
            n_u,
            basis_family,
            m,
            dt,
            x_box,
            integer_state,
            system,
        };
        let mut model = Self::zeros(config, meta, norm)
            .map_err(|e| Error::format(header_at, format!("invalid header: {e}")))?;
        let at = r.pos;
        let n = r.u64()? as usize;
        if n != model.params.len() {
            return Err(Error::format(
                at,
                format!("{n} parameters stored, architecture needs {}", model.params.len()),
            ));
        }
        model.params = read_vec(r, n)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
