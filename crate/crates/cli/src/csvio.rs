//! Match CSV files: `xA,yA,xB,yB,confidence[,variance]` in image pixels.

use std::path::Path;

use geomatch::assignment::MatchSet;
use geomatch::features::FeatureGrid;
use geomatch::refine::RefinedMatch;
use nalgebra::Point2;

use crate::error::{CliError, CliResult};

pub const COARSE_HEADER: [&str; 5] = ["xA", "yA", "xB", "yB", "confidence"];
pub const REFINED_HEADER: [&str; 6] = ["xA", "yA", "xB", "yB", "confidence", "variance"];

fn finish(w: csv::Writer<Vec<u8>>) -> Vec<u8> {
    w.into_inner().expect("in-memory writer")
}

/// Patch-centre matches.
pub fn coarse_csv(m: &MatchSet, grid_a: &FeatureGrid, grid_b: &FeatureGrid) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COARSE_HEADER).expect("in-memory");
    for mt in &m.matches {
        let (a, b) = (grid_a.cell_center(mt.i), grid_b.cell_center(mt.j));
        w.write_record([a.x.to_string(), a.y.to_string(), b.x.to_string(), b.y.to_string(), mt.confidence.to_string()])
            .expect("in-memory");
    }
    finish(w)
}

/// Sub-pixel matches with heatmap variance (px²).
pub fn refined_csv(matches: &[RefinedMatch]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REFINED_HEADER).expect("in-memory");
    for m in matches {
        w.write_record([
            m.pa.x.to_string(),
            m.pa.y.to_string(),
            m.pb.x.to_string(),
            m.pb.y.to_string(),
            m.confidence.to_string(),
            m.variance.to_string(),
        ])
        .expect("in-memory");
    }
    finish(w)
}

/// Reads the point columns of a match CSV.
pub fn read_points(path: &Path) -> CliResult<(Vec<Point2<f64>>, Vec<Point2<f64>>)> {
    let bad = |msg: String| CliError::Format(format!("{}: {msg}", path.display()));
    let file = std::fs::File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| bad(format!("missing column {name}")));
    let idx = [col("xA")?, col("yA")?, col("xB")?, col("yB")?];
    let (mut pa, mut pb) = (Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let mut v = [0.0; 4];
        for (slot, &c) in v.iter_mut().zip(&idx) {
            *slot = rec
                .get(c)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|x| x.is_finite())
                .ok_or_else(|| bad(format!("row {}: bad number in column {c}", line + 1)))?;
        }
        pa.push(Point2::new(v[0], v[1]));
        pb.push(Point2::new(v[2], v[3]));
    }
    Ok((pa, pb))
}
