//! Query sets on disk: one JSON sidecar naming up to three `PVT1` tensors
//! (embeddings, class logits, mask logits) next to it.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Ix2, Ix3};
use serde::{Deserialize, Serialize};

use super::tensor::{read_tensor, write_tensor, Dtype, Tensor};
use super::{read_bytes, write_bytes};
use crate::decoder::QuerySet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySidecar {
    pub version: u32,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "C_x")]
    pub c_x: usize,
    /// Number of real classes (logits carry one more column).
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub centers: Option<Vec<[f64; 2]>>,
    pub non_empty_flags: Option<Vec<bool>>,
    pub embeddings: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_logits: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_logits: Option<PathBuf>,
}

impl QuerySidecar {
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let s: QuerySidecar = serde_json::from_slice(bytes)?;
        if s.version != 1 {
            return Err(Error::invalid(
                "query sidecar",
                format!("unsupported version {}", s.version),
            ));
        }
        if let Some(c) = &s.centers {
            if c.len() != s.n {
                return Err(Error::shape("query sidecar centers", s.n, c.len()));
            }
        }
        if let Some(f) = &s.non_empty_flags {
            if f.len() != s.n {
                return Err(Error::shape("query sidecar non_empty_flags", s.n, f.len()));
            }
        }
        if s.class_logits.is_some() != s.k.is_some() {
            return Err(Error::invalid(
                "query sidecar",
                "K and class_logits must be given together",
            ));
        }
        Ok(s)
    }
}

fn to2(t: &Tensor, what: &'static str) -> Result<Array2<f64>> {
    t.to_array()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::shape(what, "rank 2", format!("rank {}", t.dims().len())))
}

fn to3(t: &Tensor, what: &'static str) -> Result<Array3<f64>> {
    t.to_array()
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::shape(what, "rank 3", format!("rank {}", t.dims().len())))
}

/// Assembles a query set from a parsed sidecar and its tensors.
pub fn query_set_from_parts(
    sidecar: &QuerySidecar,
    embeddings: &Tensor,
    class_logits: Option<&Tensor>,
    mask_logits: Option<&Tensor>,
) -> Result<QuerySet> {
    let embeddings = to2(embeddings, "query embeddings")?;
    if embeddings.dim() != (sidecar.n, sidecar.c_x) {
        return Err(Error::shape(
            "query embeddings",
            format!("{}x{}", sidecar.n, sidecar.c_x),
            format!("{:?}", embeddings.dim()),
        ));
    }
    let class_logits = class_logits.map(|t| to2(t, "class logits")).transpose()?;
    if let (Some(l), Some(k)) = (&class_logits, sidecar.k) {
        if l.ncols() != k + 1 {
            return Err(Error::shape("class logits columns", k + 1, l.ncols()));
        }
    }
    let centers = sidecar
        .centers
        .as_ref()
        .map(|c| Array2::from_shape_fn((c.len(), 2), |(i, j)| c[i][j]));
    let q = QuerySet {
        embeddings,
        class_logits,
        centers,
        mask_logits: mask_logits.map(|t| to3(t, "mask logits")).transpose()?,
    };
    q.validate()?;
    if let (Some(stored), Some(derived)) = (&sidecar.non_empty_flags, q.non_empty_flags()) {
        if *stored != derived {
            return Err(Error::invalid(
                "query sidecar",
                "non_empty_flags disagree with class logits",
            ));
        }
    }
    Ok(q)
}

/// Reads `<sidecar>` and the tensors it names (relative to its directory).
pub fn read_query_set(sidecar_path: impl AsRef<Path>) -> Result<QuerySet> {
    let sidecar_path = sidecar_path.as_ref();
    let sidecar = QuerySidecar::from_json_bytes(&read_bytes(sidecar_path)?)?;
    let dir = sidecar_path.parent().unwrap_or(Path::new(""));
    let load = |p: &Path| read_tensor(dir.join(p));
    let emb = load(&sidecar.embeddings)?;
    let cls = sidecar.class_logits.as_deref().map(load).transpose()?;
    let masks = sidecar.mask_logits.as_deref().map(load).transpose()?;
    query_set_from_parts(&sidecar, &emb, cls.as_ref(), masks.as_ref())
}

/// Writes `<stem>.json` plus `<stem>.embeddings.pvt` and, when present,
/// `<stem>.class_logits.pvt` and `<stem>.mask_logits.pvt` into `dir`.
/// Tensors are stored as f64 so reading back is exact. Returns the sidecar path.
pub fn write_query_set(q: &QuerySet, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let name = |kind: &str| PathBuf::from(format!("{stem}.{kind}.pvt"));
    let emb = name("embeddings");
    write_tensor(
        &Tensor::from_array(&q.embeddings.clone().into_dyn(), Dtype::F64)?,
        dir.join(&emb),
    )?;
    let class_logits = match &q.class_logits {
        Some(l) => {
            let p = name("class_logits");
            write_tensor(&Tensor::from_array(&l.clone().into_dyn(), Dtype::F64)?, dir.join(&p))?;
            Some(p)
        }
        None => None,
    };
    let mask_logits = match &q.mask_logits {
        Some(m) => {
            let p = name("mask_logits");
            write_tensor(&Tensor::from_array(&m.clone().into_dyn(), Dtype::F64)?, dir.join(&p))?;
            Some(p)
        }
        None => None,
    };
    let sidecar = QuerySidecar {
        version: 1,
        n: q.len(),
        c_x: q.dim(),
        k: q.num_classes(),
        centers: q
            .centers
            .as_ref()
            .map(|c| c.outer_iter().map(|r| [r[0], r[1]]).collect()),
        non_empty_flags: q.non_empty_flags(),
        embeddings: emb,
        class_logits,
        mask_logits,
    };
    let path = dir.join(format!("{stem}.json"));
    write_bytes(&path, serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(path)
}
