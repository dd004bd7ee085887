use std::fs;
use std::path::Path;

use crate::autodiff::Mat;
use crate::error::{Error, Result};

/// Final per-entity representation vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub segments: Mat,
    pub parcels: Mat,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.segments.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.segments.iter().chain(self.parcels.iter()).all(|v| v.is_finite())
    }

    /// CSV text with columns `entity_type,id,e_0..e_{D-1}`; segments first.
    pub fn to_csv_string(&self) -> String {
        let d = self.dim();
        let mut out = String::from("entity_type,id");
        for k in 0..d {
            out.push_str(&format!(",e_{k}"));
        }
        out.push('\n');
        for (label, m) in [("segment", &self.segments), ("parcel", &self.parcels)] {
            for (i, row) in m.rows().into_iter().enumerate() {
                out.push_str(label);
                out.push(',');
                out.push_str(&i.to_string());
                for v in row {
                    out.push(',');
                    out.push_str(&v.to_string());
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let file = path.display().to_string();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(&file, e))?;
        let headers = rdr.headers().map_err(|e| Error::parse(&file, e))?.clone();
        if headers.len() < 3 || &headers[0] != "entity_type" || &headers[1] != "id" {
            return Err(Error::parse(&file, "expected header `entity_type,id,e_0,...`"));
        }
        let d = headers.len() - 2;
        let mut rows: [Vec<(usize, Vec<f64>)>; 2] = [Vec::new(), Vec::new()];
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::parse(&file, e))?;
            let slot = match &rec[0] {
                "segment" => 0,
                "parcel" => 1,
                other => return Err(Error::parse(&file, format!("unknown entity_type `{other}`"))),
            };
            let id: usize = rec[1].parse().map_err(|e| Error::parse(&file, format!("bad id `{}`: {e}", &rec[1])))?;
            let vals = (2..rec.len())
                .map(|k| rec[k].parse::<f64>().map_err(|e| Error::parse(&file, format!("bad value `{}`: {e}", &rec[k]))))
                .collect::<Result<Vec<_>>>()?;
            rows[slot].push((id, vals));
        }
        let [segs, pars] = rows.map(|mut r| {
            r.sort_by_key(|(id, _)| *id);
            r
        });
        let to_mat = |r: Vec<(usize, Vec<f64>)>, what: &str| -> Result<Mat> {
            for (expect, (id, _)) in r.iter().enumerate() {
                if *id != expect {
                    return Err(Error::parse(&file, format!("{what} ids are not dense 0..n (missing {expect})")));
                }
            }
            let n = r.len();
            let flat: Vec<f64> = r.into_iter().flat_map(|(_, v)| v).collect();
            Mat::from_shape_vec((n, d), flat).map_err(|e| Error::parse(&file, e))
        };
        Ok(Self { segments: to_mat(segs, "segment")?, parcels: to_mat(pars, "parcel")? })
    }
}
