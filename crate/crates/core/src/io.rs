//! Flat-file bundle format: `segments.csv`, `parcels.csv`, `pois.csv`,
//! `trajectories.jsonl` and `vocab.json`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    arc_length_midpoint, linestring_to_wkt, parse_wkt_linestring, parse_wkt_polygon, polygon_centroid,
    polygon_to_wkt, project_equirectangular, Point,
};
use crate::model::*;

pub const SEGMENTS_FILE: &str = "segments.csv";
pub const PARCELS_FILE: &str = "parcels.csv";
pub const POIS_FILE: &str = "pois.csv";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Crs {
    /// Coordinates already in planar meters.
    #[default]
    Planar,
    /// Longitude/latitude degrees, projected at load time.
    Lonlat,
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabFile {
    #[serde(default)]
    crs: Crs,
    features: Vocab,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryLine {
    id: usize,
    segment_ids: Vec<usize>,
}

fn read_to_string(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))
}

fn expect_header(rdr: &mut csv::Reader<fs::File>, file: &str, expected: &[&str]) -> Result<()> {
    let headers = rdr.headers().map_err(|e| Error::parse(file, e))?;
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::parse(file, format!("expected header {expected:?}, got {got:?}")));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, file: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = rec.get(i).ok_or_else(|| Error::parse(file, format!("missing column {i}")))?;
    raw.trim().parse().map_err(|e| Error::parse(file, format!("column {i} value `{raw}`: {e}")))
}

/// Vocabulary lookup with fallback to the reserved `other` code.
fn code_of(labels: &[String], label: &str) -> usize {
    labels.iter().position(|l| l == label).unwrap_or(labels.len() - 1)
}

fn ensure_other(mut labels: Vec<String>) -> Vec<String> {
    if labels.last().map(String::as_str) != Some(OTHER_LABEL) {
        labels.retain(|l| l != OTHER_LABEL);
        labels.push(OTHER_LABEL.to_string());
    }
    labels
}

/// Maps arbitrary source ids onto dense `0..n` in ascending order.
fn densify(ids: &[i64], file: &str) -> Result<HashMap<i64, usize>> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Validation(format!("duplicate ids in {file}")));
    }
    Ok(sorted.into_iter().enumerate().map(|(i, id)| (id, i)).collect())
}

/// Loads and validates a bundle directory.
pub fn load_bundle(dir: &Path) -> Result<MapBundle> {
    let vocab_file: VocabFile =
        serde_json::from_str(&read_to_string(&dir.join(VOCAB_FILE))?).map_err(|e| Error::parse(VOCAB_FILE, e))?;
    let mut vocab: Vocab = vocab_file.features.into_iter().map(|(k, v)| (k, ensure_other(v))).collect();
    for key in [SEGMENT_CATEGORY_VOCAB, PARCEL_FUNCTION_VOCAB, POI_CATEGORY_VOCAB] {
        vocab.entry(key.to_string()).or_insert_with(|| vec![OTHER_LABEL.to_string()]);
    }

    // segments
    let mut rdr = csv_reader(&dir.join(SEGMENTS_FILE))?;
    expect_header(&mut rdr, SEGMENTS_FILE, &["id", "wkt_linestring", "category", "length_m", "lanes", "max_speed", "lon", "lat"])?;
    let mut seg_rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(SEGMENTS_FILE, e))?;
        let id: i64 = field(&rec, 0, SEGMENTS_FILE)?;
        let line = parse_wkt_linestring(&rec[1]).map_err(|e| Error::parse(SEGMENTS_FILE, e))?;
        let cat = code_of(&vocab[SEGMENT_CATEGORY_VOCAB], rec[2].trim()) as f64;
        let mut feats = vec![cat];
        for i in 3..8 {
            feats.push(field::<f64>(&rec, i, SEGMENTS_FILE)?);
        }
        seg_rows.push((id, line, feats));
    }

    // parcels
    let mut rdr = csv_reader(&dir.join(PARCELS_FILE))?;
    expect_header(
        &mut rdr,
        PARCELS_FILE,
        &["id", "wkt_polygon", "function", "cbd_flag", "n_buildings", "avg_floors", "area_m2", "lon", "lat"],
    )?;
    let mut parcel_rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(PARCELS_FILE, e))?;
        let id: i64 = field(&rec, 0, PARCELS_FILE)?;
        let ring = parse_wkt_polygon(&rec[1]).map_err(|e| Error::parse(PARCELS_FILE, e))?;
        let func = code_of(&vocab[PARCEL_FUNCTION_VOCAB], rec[2].trim()) as f64;
        let cbd: f64 = field(&rec, 3, PARCELS_FILE)?;
        let mut feats = vec![func, if cbd != 0.0 { 1.0 } else { 0.0 }];
        for i in 4..9 {
            feats.push(field::<f64>(&rec, i, PARCELS_FILE)?);
        }
        parcel_rows.push((id, ring, feats));
    }

    // pois
    let mut rdr = csv_reader(&dir.join(POIS_FILE))?;
    expect_header(&mut rdr, POIS_FILE, &["id", "x", "y", "category"])?;
    let mut poi_rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(POIS_FILE, e))?;
        let id: i64 = field(&rec, 0, POIS_FILE)?;
        let p = Point::new(field(&rec, 1, POIS_FILE)?, field(&rec, 2, POIS_FILE)?);
        let cat = code_of(&vocab[POI_CATEGORY_VOCAB], rec[3].trim());
        poi_rows.push((id, p, cat));
    }

    // trajectories
    let text = read_to_string(&dir.join(TRAJECTORIES_FILE))?;
    let mut traj_rows = Vec::new();
    for (lineno, line) in BufReader::new(text.as_bytes()).lines().enumerate() {
        let line = line.map_err(|e| Error::io(dir.join(TRAJECTORIES_FILE), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TrajectoryLine = serde_json::from_str(&line)
            .map_err(|e| Error::parse(TRAJECTORIES_FILE, format!("line {}: {e}", lineno + 1)))?;
        traj_rows.push(t);
    }

    if vocab_file.crs == Crs::Lonlat {
        project_rows(&mut seg_rows, &mut parcel_rows, &mut poi_rows);
    }

    let seg_ids = densify(&seg_rows.iter().map(|r| r.0).collect::<Vec<_>>(), SEGMENTS_FILE)?;
    let parcel_ids = densify(&parcel_rows.iter().map(|r| r.0).collect::<Vec<_>>(), PARCELS_FILE)?;
    let poi_ids = densify(&poi_rows.iter().map(|r| r.0).collect::<Vec<_>>(), POIS_FILE)?;

    let mut segments: Vec<RoadSegment> = seg_rows
        .into_iter()
        .map(|(id, polyline, raw_features)| RoadSegment {
            id: seg_ids[&id],
            midpoint: if polyline.len() >= 2 { arc_length_midpoint(&polyline) } else { Point::new(f64::NAN, f64::NAN) },
            polyline,
            raw_features,
        })
        .collect();
    segments.sort_by_key(|s| s.id);
    let mut parcels: Vec<LandParcel> = parcel_rows
        .into_iter()
        .map(|(id, polygon, raw_features)| LandParcel {
            id: parcel_ids[&id],
            centroid: polygon_centroid(&polygon),
            polygon,
            raw_features,
        })
        .collect();
    parcels.sort_by_key(|r| r.id);
    let mut pois: Vec<Poi> = poi_rows
        .into_iter()
        .map(|(id, location, category)| Poi { id: poi_ids[&id], location, category })
        .collect();
    pois.sort_by_key(|p| p.id);

    let mut offenders = Vec::new();
    let mut trajectories = Vec::with_capacity(traj_rows.len());
    for t in traj_rows {
        let mut ids = Vec::with_capacity(t.segment_ids.len());
        for s in &t.segment_ids {
            match seg_ids.get(&(*s as i64)) {
                Some(&d) => ids.push(d),
                None => offenders.push(format!("trajectory {} -> segment {s}", t.id)),
            }
        }
        trajectories.push(SegmentTrajectory { id: t.id, segment_ids: ids });
    }
    if !offenders.is_empty() {
        return Err(Error::Validation(format!("dangling trajectory segment ids: {}", offenders.join(", "))));
    }

    let seg_feats: Vec<Vec<f64>> = segments.iter().map(|s| s.raw_features.clone()).collect();
    let parcel_feats: Vec<Vec<f64>> = parcels.iter().map(|r| r.raw_features.clone()).collect();
    let bundle = MapBundle {
        segment_schema: infer_schema(
            &SEGMENT_FEATURES,
            &seg_feats,
            &[("category", vocab[SEGMENT_CATEGORY_VOCAB].len())],
        ),
        parcel_schema: infer_schema(
            &PARCEL_FEATURES,
            &parcel_feats,
            &[("function", vocab[PARCEL_FUNCTION_VOCAB].len()), ("cbd_flag", 2)],
        ),
        segments,
        parcels,
        pois,
        trajectories,
        vocab,
    };
    bundle.validate()?;
    Ok(bundle)
}

type SegRow = (i64, Vec<Point>, Vec<f64>);
type PoiRow = (i64, Point, usize);

/// Projects all lon/lat coordinates around the mean segment vertex.
fn project_rows(segs: &mut [SegRow], parcels: &mut [SegRow], pois: &mut [PoiRow]) {
    let verts: Vec<Point> = segs.iter().flat_map(|r| r.1.iter().copied()).collect();
    if verts.is_empty() {
        return;
    }
    let n = verts.len() as f64;
    let lon0 = verts.iter().map(|p| p.x).sum::<f64>() / n;
    let lat0 = verts.iter().map(|p| p.y).sum::<f64>() / n;
    let proj = |p: Point| project_equirectangular(p.x, p.y, lon0, lat0);
    for r in segs.iter_mut() {
        r.1.iter_mut().for_each(|p| *p = proj(*p));
        let q = proj(Point::new(r.2[4], r.2[5]));
        r.2[4] = q.x;
        r.2[5] = q.y;
    }
    for r in parcels.iter_mut() {
        r.1.iter_mut().for_each(|p| *p = proj(*p));
        let q = proj(Point::new(r.2[5], r.2[6]));
        r.2[5] = q.x;
        r.2[6] = q.y;
    }
    for r in pois.iter_mut() {
        r.1 = proj(r.1);
    }
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn label(vocab: &Vocab, key: &str, code: f64) -> String {
    vocab[key].get(code as usize).cloned().unwrap_or_else(|| OTHER_LABEL.to_string())
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let to_err = |e: csv::Error| Error::parse(path.display().to_string(), e);
    w.write_record(header).map_err(to_err)?;
    for r in rows {
        w.write_record(&r).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a bundle in planar coordinates.
pub fn save_bundle(bundle: &MapBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let v = &bundle.vocab;
    write_csv(
        &dir.join(SEGMENTS_FILE),
        &["id", "wkt_linestring", "category", "length_m", "lanes", "max_speed", "lon", "lat"],
        bundle.segments.iter().map(|s| {
            let f = &s.raw_features;
            let mut row = vec![s.id.to_string(), linestring_to_wkt(&s.polyline), label(v, SEGMENT_CATEGORY_VOCAB, f[0])];
            row.extend(f[1..].iter().map(|x| x.to_string()));
            row
        }),
    )?;
    write_csv(
        &dir.join(PARCELS_FILE),
        &["id", "wkt_polygon", "function", "cbd_flag", "n_buildings", "avg_floors", "area_m2", "lon", "lat"],
        bundle.parcels.iter().map(|r| {
            let f = &r.raw_features;
            let mut row = vec![r.id.to_string(), polygon_to_wkt(&r.polygon), label(v, PARCEL_FUNCTION_VOCAB, f[0])];
            row.extend(f[1..].iter().map(|x| x.to_string()));
            row
        }),
    )?;
    write_csv(
        &dir.join(POIS_FILE),
        &["id", "x", "y", "category"],
        bundle.pois.iter().map(|p| {
            vec![
                p.id.to_string(),
                p.location.x.to_string(),
                p.location.y.to_string(),
                label(v, POI_CATEGORY_VOCAB, p.category as f64),
            ]
        }),
    )?;
    let path = dir.join(TRAJECTORIES_FILE);
    let mut f = std::io::BufWriter::new(create(&path)?);
    for t in &bundle.trajectories {
        let line = serde_json::to_string(&TrajectoryLine { id: t.id, segment_ids: t.segment_ids.clone() })
            .expect("trajectory serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    f.flush().map_err(|e| Error::io(&path, e))?;
    let vf = VocabFile { crs: Crs::Planar, features: bundle.vocab.clone() };
    let path = dir.join(VOCAB_FILE);
    fs::write(&path, serde_json::to_string_pretty(&vf).expect("vocab serializes")).map_err(|e| Error::io(&path, e))
}
