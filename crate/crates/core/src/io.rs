//! CSV and text artifacts: every stage output is a plain inspectable
//! file that round-trips losslessly through its loader.
//!
//! Floats in CSVs are written with the shortest representation that
//! parses back to the same bits, so decimal files restore state exactly.
//! Checkpoints additionally encode every float as its IEEE bit pattern
//! and carry the seed and config hash, so a resumed run either replays
//! the original bit for bit or refuses to start. Missing values are the
//! literal `NA`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bivariate::{Stage3Chain, Stage3Draw, Stage3Run, Stage3State};
use crate::error::{Error, Result};
use crate::eval::{CvScheme, MaskCell, MaskPattern, PredictiveCdf};
use crate::forest::{forest_from_text, forest_to_text, ForestModel};
use crate::lgcp::{LgcpChain, LgcpDraw, LgcpRun, LgcpState};
use crate::mathx::{fmt_hex_f64, parse_hex_f64};
use crate::mesh::{Point2, TriMesh};
use crate::occurrence::{Stage1Chain, Stage1Draw, Stage1Run, Stage1State};
use crate::panel::{ObservationPanel, PeriodLabel, Variable};
use crate::surfaces::Surfaces;
use crate::synth::SimTruth;

pub const PANEL_CSV: &str = "panel.csv";
pub const TRUTH_CSV: &str = "truth.csv";
pub const MASKED_PANEL_CSV: &str = "panel_masked.csv";
pub const MESH_NODES_CSV: &str = "mesh_nodes.csv";
pub const MESH_TRIANGLES_CSV: &str = "mesh_triangles.csv";
pub const STAGE1_DRAWS_CSV: &str = "stage1_draws.csv";
pub const STAGE1_FIELDS_CSV: &str = "stage1_fields.csv";
pub const STAGE1_MISSING_CSV: &str = "stage1_missing.csv";
pub const STAGE1_META_CSV: &str = "stage1_meta.csv";
pub const STAGE1_CHECKPOINT: &str = "stage1_checkpoint.txt";
pub const SURFACES_CSV: &str = "surfaces.csv";
pub const STAGE3_DRAWS_CSV: &str = "stage3_draws.csv";
pub const STAGE3_TARGETS_CSV: &str = "stage3_targets.csv";
pub const STAGE3_MEANS_CSV: &str = "stage3_target_means.csv";
pub const STAGE3_META_CSV: &str = "stage3_meta.csv";
pub const STAGE3_CHECKPOINT: &str = "stage3_checkpoint.txt";
pub const FOREST_TXT: &str = "forest.txt";
pub const LGCP_DRAWS_CSV: &str = "lgcp_draws.csv";
pub const LGCP_TARGETS_CSV: &str = "lgcp_targets.csv";
pub const LGCP_LAMBDA_CSV: &str = "lgcp_lambda.csv";
pub const LGCP_META_CSV: &str = "lgcp_meta.csv";
pub const LGCP_CHECKPOINT: &str = "lgcp_checkpoint.txt";
pub const MASK_CSV: &str = "mask.csv";
pub const MASK_META_CSV: &str = "mask_meta.csv";
pub const SCORES_CSV: &str = "scores.csv";
pub const REPORT_TXT: &str = "report.txt";

/// Prediction file for one model, e.g. `predictions_pipeline.csv`.
pub fn predictions_csv(model: &str) -> String {
    format!("predictions_{model}.csv")
}

/// Manifest written next to each subcommand's outputs.
pub fn manifest_csv(subcommand: &str) -> String {
    format!("manifest_{subcommand}.csv")
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), line, reason: reason.into() }
}

/// Line number a csv record started on, for error messages.
fn record_line(record: &csv::StringRecord) -> usize {
    record.position().map(|p| p.line() as usize).unwrap_or(0)
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )));
    }
    Ok(csv::ReaderBuilder::new().has_headers(true).from_path(path)?)
}

fn expect_header(path: &Path, reader: &mut csv::Reader<std::fs::File>, want: &[&str]) -> Result<()> {
    let got = reader.headers()?.clone();
    if got.iter().ne(want.iter().copied()) {
        return Err(parse_err(
            path,
            1,
            format!("header {:?}, expected {:?}", got.iter().collect::<Vec<_>>(), want),
        ));
    }
    Ok(())
}

fn field<'a>(path: &Path, record: &'a csv::StringRecord, idx: usize) -> Result<&'a str> {
    record
        .get(idx)
        .ok_or_else(|| parse_err(path, record_line(record), format!("missing column {idx}")))
}

fn parse_f64(path: &Path, record: &csv::StringRecord, idx: usize) -> Result<f64> {
    let s = field(path, record, idx)?;
    s.parse().map_err(|_| {
        parse_err(path, record_line(record), format!("{s:?} is not a number"))
    })
}

fn parse_usize(path: &Path, record: &csv::StringRecord, idx: usize) -> Result<usize> {
    let s = field(path, record, idx)?;
    s.parse().map_err(|_| {
        parse_err(path, record_line(record), format!("{s:?} is not an index"))
    })
}

fn parse_u64(path: &Path, record: &csv::StringRecord, idx: usize) -> Result<u64> {
    let s = field(path, record, idx)?;
    s.parse().map_err(|_| {
        parse_err(path, record_line(record), format!("{s:?} is not a count"))
    })
}

fn parse_opt_f64(path: &Path, record: &csv::StringRecord, idx: usize) -> Result<Option<f64>> {
    let s = field(path, record, idx)?;
    if s == "NA" {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| {
            parse_err(path, record_line(record), format!("{s:?} is not a number or NA"))
        })
    }
}

fn parse_opt_u32(path: &Path, record: &csv::StringRecord, idx: usize) -> Result<Option<u32>> {
    let s = field(path, record, idx)?;
    if s == "NA" {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| {
            parse_err(path, record_line(record), format!("{s:?} is not a count or NA"))
        })
    }
}

fn parse_variable(path: &Path, record: &csv::StringRecord, idx: usize) -> Result<Variable> {
    field(path, record, idx)?.parse()
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

fn fmt_opt_u32(v: Option<u32>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

// ---------------------------------------------------------------- panel

/// `pixel_id,lon,lat,year,month,cnt,ba`, period-major rows, `NA` missing.
pub fn save_panel(path: &Path, panel: &ObservationPanel) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["pixel_id", "lon", "lat", "year", "month", "cnt", "ba"])?;
    for (tt, label) in panel.periods().iter().enumerate() {
        for (i, p) in panel.locations().iter().enumerate() {
            w.write_record([
                i.to_string(),
                p.lon.to_string(),
                p.lat.to_string(),
                label.year.to_string(),
                label.month.to_string(),
                fmt_opt_u32(panel.cnt(i, tt)),
                fmt_opt_f64(panel.ba(i, tt)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_panel(path: &Path) -> Result<ObservationPanel> {
    let mut reader = open_reader(path)?;
    expect_header(path, &mut reader, &["pixel_id", "lon", "lat", "year", "month", "cnt", "ba"])?;
    struct Row {
        pixel: usize,
        loc: Point2,
        label: PeriodLabel,
        cnt: Option<u32>,
        ba: Option<f64>,
    }
    let mut rows = Vec::new();
    let mut periods: Vec<PeriodLabel> = Vec::new();
    let mut n = 0usize;
    for record in reader.records() {
        let record = record?;
        let label = PeriodLabel {
            year: parse_usize(path, &record, 3)? as i32,
            month: parse_usize(path, &record, 4)? as u32,
        };
        if !periods.contains(&label) {
            periods.push(label);
        }
        let pixel = parse_usize(path, &record, 0)?;
        n = n.max(pixel + 1);
        rows.push(Row {
            pixel,
            loc: Point2::new(parse_f64(path, &record, 1)?, parse_f64(path, &record, 2)?),
            label,
            cnt: parse_opt_u32(path, &record, 5)?,
            ba: parse_opt_f64(path, &record, 6)?,
        });
    }
    let t = periods.len();
    if n == 0 || t == 0 {
        return Err(Error::DataIntegrity(format!("{} holds no observations", path.display())));
    }
    if rows.len() != n * t {
        return Err(Error::DataIntegrity(format!(
            "{} has {} rows, expected {n} pixels x {t} periods",
            path.display(),
            rows.len()
        )));
    }
    let mut locations = vec![None; n];
    let mut ba = vec![None; n * t];
    let mut cnt = vec![None; n * t];
    let mut seen = vec![false; n * t];
    for row in rows {
        match &locations[row.pixel] {
            None => locations[row.pixel] = Some(row.loc),
            Some(p) if p.lon == row.loc.lon && p.lat == row.loc.lat => {}
            Some(p) => {
                return Err(Error::DataIntegrity(format!(
                    "pixel {} listed at ({}, {}) and ({}, {})",
                    row.pixel, p.lon, p.lat, row.loc.lon, row.loc.lat
                )))
            }
        }
        let tt = periods.iter().position(|l| *l == row.label).unwrap();
        let cell = tt * n + row.pixel;
        if seen[cell] {
            return Err(Error::DataIntegrity(format!(
                "pixel {} appears twice in {}-{:02}",
                row.pixel, row.label.year, row.label.month
            )));
        }
        seen[cell] = true;
        ba[cell] = row.ba;
        cnt[cell] = row.cnt;
    }
    let locations: Vec<Point2> = locations
        .into_iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| Error::DataIntegrity(format!("pixel {i} never appears"))))
        .collect::<Result<_>>()?;
    ObservationPanel::new(locations, periods, ba, cnt)
}

// ---------------------------------------------------------------- truth

/// Long format `name,pixel_id,year,month,value`: scalar truths carry NA
/// coordinates, surfaces carry a pixel, latent fields carry both.
pub fn save_truth(path: &Path, truth: &SimTruth, periods: &[PeriodLabel]) -> Result<()> {
    let n = truth.mu_z.len();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["name", "pixel_id", "year", "month", "value"])?;
    for (name, value) in [
        ("phi_eps", truth.phi_eps),
        ("r_eps", truth.r_eps),
        ("phi_eta", truth.phi_eta),
        ("r_eta", truth.r_eta),
        ("rho_eta", truth.rho_eta),
    ] {
        w.write_record([name, "NA", "NA", "NA", &value.to_string()])?;
    }
    for (name, values) in [
        ("mu_z", &truth.mu_z),
        ("mu1", &truth.mu1),
        ("sigma1", &truth.sigma1),
        ("mu2", &truth.mu2),
        ("sigma2", &truth.sigma2),
    ] {
        for (i, v) in values.iter().enumerate() {
            w.write_record([name, &i.to_string(), "NA", "NA", &v.to_string()])?;
        }
    }
    for (name, values) in [("x", &truth.x), ("w1", &truth.w1), ("w2", &truth.w2)] {
        for (tt, label) in periods.iter().enumerate() {
            for i in 0..n {
                w.write_record([
                    name,
                    &i.to_string(),
                    &label.year.to_string(),
                    &label.month.to_string(),
                    &values[tt * n + i].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_truth(path: &Path, periods: &[PeriodLabel]) -> Result<SimTruth> {
    let mut reader = open_reader(path)?;
    expect_header(path, &mut reader, &["name", "pixel_id", "year", "month", "value"])?;
    let mut scalars: BTreeMap<String, f64> = BTreeMap::new();
    let mut surfaces: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    let mut fields: BTreeMap<String, Vec<(usize, usize, f64)>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let name = field(path, &record, 0)?.to_string();
        let value = parse_f64(path, &record, 4)?;
        let pixel = field(path, &record, 1)?;
        if pixel == "NA" {
            scalars.insert(name, value);
            continue;
        }
        let pixel: usize = pixel.parse().map_err(|_| {
            parse_err(path, record_line(&record), "bad pixel_id")
        })?;
        if field(path, &record, 2)? == "NA" {
            surfaces.entry(name).or_default().push((pixel, value));
        } else {
            let label = PeriodLabel {
                year: parse_usize(path, &record, 2)? as i32,
                month: parse_usize(path, &record, 3)? as u32,
            };
            let tt = periods.iter().position(|l| *l == label).ok_or_else(|| {
                parse_err(path, record_line(&record), "period not in the panel")
            })?;
            fields.entry(name).or_default().push((pixel, tt, value));
        }
    }
    let scalar = |name: &str| -> Result<f64> {
        scalars
            .get(name)
            .copied()
            .ok_or_else(|| Error::DataIntegrity(format!("truth scalar {name} missing")))
    };
    let n = surfaces.get("mu_z").map(Vec::len).unwrap_or(0);
    if n == 0 {
        return Err(Error::DataIntegrity("truth file lists no mu_z surface".into()));
    }
    let surface = |name: &str| -> Result<Vec<f64>> {
        let rows = surfaces
            .get(name)
            .ok_or_else(|| Error::DataIntegrity(format!("truth surface {name} missing")))?;
        let mut out = vec![f64::NAN; n];
        let mut seen = vec![false; n];
        for &(i, v) in rows {
            if i >= n || seen[i] {
                return Err(Error::DataIntegrity(format!("truth surface {name} row {i} invalid")));
            }
            seen[i] = true;
            out[i] = v;
        }
        if seen.iter().all(|&s| s) {
            Ok(out)
        } else {
            Err(Error::DataIntegrity(format!("truth surface {name} incomplete")))
        }
    };
    let grid = |name: &str| -> Result<Vec<f64>> {
        let rows = fields
            .get(name)
            .ok_or_else(|| Error::DataIntegrity(format!("truth field {name} missing")))?;
        let mut out = vec![f64::NAN; n * periods.len()];
        let mut seen = vec![false; n * periods.len()];
        for &(i, tt, v) in rows {
            let cell = tt * n + i;
            if i >= n || seen[cell] {
                return Err(Error::DataIntegrity(format!("truth field {name} cell {i},{tt} invalid")));
            }
            seen[cell] = true;
            out[cell] = v;
        }
        if seen.iter().all(|&s| s) {
            Ok(out)
        } else {
            Err(Error::DataIntegrity(format!("truth field {name} incomplete")))
        }
    };
    Ok(SimTruth {
        phi_eps: scalar("phi_eps")?,
        r_eps: scalar("r_eps")?,
        phi_eta: scalar("phi_eta")?,
        r_eta: scalar("r_eta")?,
        rho_eta: scalar("rho_eta")?,
        mu_z: surface("mu_z")?,
        mu1: surface("mu1")?,
        sigma1: surface("sigma1")?,
        mu2: surface("mu2")?,
        sigma2: surface("sigma2")?,
        x: grid("x")?,
        w1: grid("w1")?,
        w2: grid("w2")?,
    })
}

// ----------------------------------------------------------------- mesh

pub fn save_mesh(nodes_path: &Path, triangles_path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut w = csv::Writer::from_path(nodes_path)?;
    w.write_record(["node_id", "lon", "lat"])?;
    for (j, p) in mesh.nodes().iter().enumerate() {
        w.write_record([j.to_string(), p.lon.to_string(), p.lat.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(triangles_path)?;
    w.write_record(["tri_id", "n1", "n2", "n3"])?;
    for (k, tri) in mesh.triangles().iter().enumerate() {
        w.write_record([
            k.to_string(),
            tri[0].to_string(),
            tri[1].to_string(),
            tri[2].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_mesh(nodes_path: &Path, triangles_path: &Path) -> Result<TriMesh> {
    let mut reader = open_reader(nodes_path)?;
    expect_header(nodes_path, &mut reader, &["node_id", "lon", "lat"])?;
    let mut nodes = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        if parse_usize(nodes_path, &record, 0)? != k {
            return Err(parse_err(nodes_path, record_line(&record), "node ids must be 0..n in order"));
        }
        nodes.push(Point2::new(
            parse_f64(nodes_path, &record, 1)?,
            parse_f64(nodes_path, &record, 2)?,
        ));
    }
    let mut reader = open_reader(triangles_path)?;
    expect_header(triangles_path, &mut reader, &["tri_id", "n1", "n2", "n3"])?;
    let mut triangles = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        if parse_usize(triangles_path, &record, 0)? != k {
            return Err(parse_err(
                triangles_path,
                record_line(&record),
                "triangle ids must be 0..m in order",
            ));
        }
        triangles.push([
            parse_usize(triangles_path, &record, 1)?,
            parse_usize(triangles_path, &record, 2)?,
            parse_usize(triangles_path, &record, 3)?,
        ]);
    }
    TriMesh::from_parts(nodes, triangles)
}

// ------------------------------------------------------------- surfaces

pub fn save_surfaces(path: &Path, surfaces: &Surfaces) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["pixel_id", "mu1", "sigma1", "mu2", "sigma2"])?;
    for i in 0..surfaces.mu1.len() {
        w.write_record([
            i.to_string(),
            surfaces.mu1[i].to_string(),
            surfaces.sigma1[i].to_string(),
            surfaces.mu2[i].to_string(),
            surfaces.sigma2[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_surfaces(path: &Path) -> Result<Surfaces> {
    let mut reader = open_reader(path)?;
    expect_header(path, &mut reader, &["pixel_id", "mu1", "sigma1", "mu2", "sigma2"])?;
    let mut out = Surfaces { mu1: vec![], sigma1: vec![], mu2: vec![], sigma2: vec![] };
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if parse_usize(path, &record, 0)? != i {
            return Err(parse_err(path, record_line(&record), "pixel ids must be 0..n in order"));
        }
        out.mu1.push(parse_f64(path, &record, 1)?);
        out.sigma1.push(parse_f64(path, &record, 2)?);
        out.mu2.push(parse_f64(path, &record, 3)?);
        out.sigma2.push(parse_f64(path, &record, 4)?);
    }
    let n = out.mu1.len();
    out.validate(n)?;
    Ok(out)
}

// --------------------------------------------------------- stage 1 chain

/// Four files: scalar draws, wide trend fields, missing-cell accumulators,
/// and counters. Together they restore the chain exactly.
pub fn save_stage1_chain(dir: &Path, chain: &Stage1Chain, periods: &[PeriodLabel]) -> Result<()> {
    let p_theta = chain.draws.first().map(|d| d.theta.len()).unwrap_or(0);
    let l_gamma = chain.draws.first().map(|d| d.gamma.len()).unwrap_or(0);
    let mut w = csv::Writer::from_path(dir.join(STAGE1_DRAWS_CSV))?;
    let mut header = vec!["draw".to_string(), "tau".into(), "phi".into(), "r".into()];
    header.extend((0..p_theta).map(|j| format!("theta{j}")));
    header.extend((0..l_gamma).map(|j| format!("gamma{j}")));
    w.write_record(&header)?;
    for (d, draw) in chain.draws.iter().enumerate() {
        let mut row = vec![
            d.to_string(),
            draw.tau.to_string(),
            draw.phi.to_string(),
            draw.r.to_string(),
        ];
        row.extend(draw.theta.iter().map(|v| v.to_string()));
        row.extend(draw.gamma.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(STAGE1_FIELDS_CSV))?;
    let mut header = vec!["draw".to_string()];
    header.extend((0..chain.n).map(|i| format!("mu_z{i}")));
    w.write_record(&header)?;
    for (d, draw) in chain.draws.iter().enumerate() {
        let mut row = vec![d.to_string()];
        row.extend(draw.mu_z.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(STAGE1_MISSING_CSV))?;
    w.write_record(["pixel_id", "period", "year", "month", "cond_prob_sum"])?;
    for (k, &(i, tt)) in chain.missing_cells.iter().enumerate() {
        w.write_record([
            i.to_string(),
            tt.to_string(),
            periods[tt].year.to_string(),
            periods[tt].month.to_string(),
            chain.cond_prob_sum[k].to_string(),
        ])?;
    }
    w.flush()?;

    save_meta(
        &dir.join(STAGE1_META_CSV),
        &[
            ("n", chain.n.to_string()),
            ("t", chain.t.to_string()),
            ("cond_draws", chain.cond_draws.to_string()),
            ("accept_phi", chain.accept_phi.to_string()),
            ("attempt_phi", chain.attempt_phi.to_string()),
            ("accept_r", chain.accept_r.to_string()),
            ("attempt_r", chain.attempt_r.to_string()),
        ],
    )
}

pub fn load_stage1_chain(dir: &Path) -> Result<Stage1Chain> {
    let meta = load_meta(&dir.join(STAGE1_META_CSV))?;
    let n = meta_usize(&meta, "n")?;
    let t = meta_usize(&meta, "t")?;

    let path = dir.join(STAGE1_DRAWS_CSV);
    let mut reader = open_reader(&path)?;
    let header = reader.headers()?.clone();
    let p_theta = header.iter().filter(|h| h.starts_with("theta")).count();
    let l_gamma = header.iter().filter(|h| h.starts_with("gamma")).count();
    let mut draws = Vec::new();
    for (d, record) in reader.records().enumerate() {
        let record = record?;
        if parse_usize(&path, &record, 0)? != d {
            return Err(parse_err(&path, record_line(&record), "draws must be 0..k in order"));
        }
        let mut theta = Vec::with_capacity(p_theta);
        for j in 0..p_theta {
            theta.push(parse_f64(&path, &record, 4 + j)?);
        }
        let mut gamma = Vec::with_capacity(l_gamma);
        for j in 0..l_gamma {
            gamma.push(parse_f64(&path, &record, 4 + p_theta + j)?);
        }
        draws.push(Stage1Draw {
            mu_z: Vec::new(),
            theta,
            tau: parse_f64(&path, &record, 1)?,
            phi: parse_f64(&path, &record, 2)?,
            r: parse_f64(&path, &record, 3)?,
            gamma,
        });
    }

    let path = dir.join(STAGE1_FIELDS_CSV);
    let mut reader = open_reader(&path)?;
    if reader.headers()?.len() != n + 1 {
        return Err(parse_err(&path, 1, format!("expected {} columns", n + 1)));
    }
    for (d, record) in reader.records().enumerate() {
        let record = record?;
        if d >= draws.len() {
            return Err(parse_err(&path, record_line(&record), "more field rows than draws"));
        }
        let mut mu_z = Vec::with_capacity(n);
        for i in 0..n {
            mu_z.push(parse_f64(&path, &record, 1 + i)?);
        }
        draws[d].mu_z = mu_z;
    }
    if draws.iter().any(|d| d.mu_z.len() != n) {
        return Err(Error::DataIntegrity(format!(
            "{} lists fewer rows than {}",
            path.display(),
            STAGE1_DRAWS_CSV
        )));
    }

    let path = dir.join(STAGE1_MISSING_CSV);
    let mut reader = open_reader(&path)?;
    expect_header(&path, &mut reader, &["pixel_id", "period", "year", "month", "cond_prob_sum"])?;
    let mut missing_cells = Vec::new();
    let mut cond_prob_sum = Vec::new();
    for record in reader.records() {
        let record = record?;
        missing_cells.push((parse_usize(&path, &record, 0)?, parse_usize(&path, &record, 1)?));
        cond_prob_sum.push(parse_f64(&path, &record, 4)?);
    }

    Ok(Stage1Chain {
        n,
        t,
        draws,
        missing_cells,
        cond_prob_sum,
        cond_draws: meta_usize(&meta, "cond_draws")?,
        accept_phi: meta_u64(&meta, "accept_phi")?,
        attempt_phi: meta_u64(&meta, "attempt_phi")?,
        accept_r: meta_u64(&meta, "accept_r")?,
        attempt_r: meta_u64(&meta, "attempt_r")?,
    })
}

// --------------------------------------------------------- stage 3 chain

pub fn save_stage3_chain(dir: &Path, chain: &Stage3Chain, periods: &[PeriodLabel]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(STAGE3_DRAWS_CSV))?;
    w.write_record(["draw", "phi", "r", "rho"])?;
    for (d, draw) in chain.draws.iter().enumerate() {
        w.write_record([
            d.to_string(),
            draw.phi.to_string(),
            draw.r.to_string(),
            draw.rho.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(STAGE3_TARGETS_CSV))?;
    w.write_record(["target_index", "pixel_id", "period", "year", "month"])?;
    for (k, &(i, tt)) in chain.targets.iter().enumerate() {
        w.write_record([
            k.to_string(),
            i.to_string(),
            tt.to_string(),
            periods[tt].year.to_string(),
            periods[tt].month.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(STAGE3_MEANS_CSV))?;
    w.write_record(["draw", "target_index", "m1", "m2"])?;
    let k = chain.targets.len();
    for (idx, pair) in chain.target_means.iter().enumerate() {
        w.write_record([
            (idx / k.max(1)).to_string(),
            (idx % k.max(1)).to_string(),
            pair[0].to_string(),
            pair[1].to_string(),
        ])?;
    }
    w.flush()?;

    save_meta(
        &dir.join(STAGE3_META_CSV),
        &[
            ("n", chain.n.to_string()),
            ("t", chain.t.to_string()),
            ("accept_phi", chain.accept_phi.to_string()),
            ("attempt_phi", chain.attempt_phi.to_string()),
            ("accept_r", chain.accept_r.to_string()),
            ("attempt_r", chain.attempt_r.to_string()),
            ("accept_rho", chain.accept_rho.to_string()),
            ("attempt_rho", chain.attempt_rho.to_string()),
        ],
    )
}

pub fn load_stage3_chain(dir: &Path) -> Result<Stage3Chain> {
    let meta = load_meta(&dir.join(STAGE3_META_CSV))?;
    let path = dir.join(STAGE3_DRAWS_CSV);
    let mut reader = open_reader(&path)?;
    expect_header(&path, &mut reader, &["draw", "phi", "r", "rho"])?;
    let mut draws = Vec::new();
    for record in reader.records() {
        let record = record?;
        draws.push(Stage3Draw {
            phi: parse_f64(&path, &record, 1)?,
            r: parse_f64(&path, &record, 2)?,
            rho: parse_f64(&path, &record, 3)?,
        });
    }

    let path = dir.join(STAGE3_TARGETS_CSV);
    let mut reader = open_reader(&path)?;
    expect_header(&path, &mut reader, &["target_index", "pixel_id", "period", "year", "month"])?;
    let mut targets = Vec::new();
    for record in reader.records() {
        let record = record?;
        targets.push((parse_usize(&path, &record, 1)?, parse_usize(&path, &record, 2)?));
    }

    let path = dir.join(STAGE3_MEANS_CSV);
    let mut reader = open_reader(&path)?;
    expect_header(&path, &mut reader, &["draw", "target_index", "m1", "m2"])?;
    let mut target_means = Vec::new();
    for record in reader.records() {
        let record = record?;
        target_means.push([parse_f64(&path, &record, 2)?, parse_f64(&path, &record, 3)?]);
    }
    if target_means.len() != draws.len() * targets.len() {
        return Err(Error::DataIntegrity(format!(
            "{} rows do not tile draws x targets",
            path.display()
        )));
    }

    Ok(Stage3Chain {
        n: meta_usize(&meta, "n")?,
        t: meta_usize(&meta, "t")?,
        draws,
        targets,
        target_means,
        accept_phi: meta_u64(&meta, "accept_phi")?,
        attempt_phi: meta_u64(&meta, "attempt_phi")?,
        accept_r: meta_u64(&meta, "accept_r")?,
        attempt_r: meta_u64(&meta, "attempt_r")?,
        accept_rho: meta_u64(&meta, "accept_rho")?,
        attempt_rho: meta_u64(&meta, "attempt_rho")?,
    })
}

// ------------------------------------------------------------ lgcp chain

pub fn save_lgcp_chain(dir: &Path, chain: &LgcpChain, periods: &[PeriodLabel]) -> Result<()> {
    let p = chain.draws.first().map(|d| d.beta.len()).unwrap_or(0);
    let mut w = csv::Writer::from_path(dir.join(LGCP_DRAWS_CSV))?;
    let mut header = vec!["draw".to_string(), "phi".into(), "r".into()];
    header.extend((0..p).map(|j| format!("beta{j}")));
    w.write_record(&header)?;
    for (d, draw) in chain.draws.iter().enumerate() {
        let mut row = vec![d.to_string(), draw.phi.to_string(), draw.r.to_string()];
        row.extend(draw.beta.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(LGCP_TARGETS_CSV))?;
    w.write_record(["target_index", "pixel_id", "period", "year", "month"])?;
    for (k, &(i, tt)) in chain.targets.iter().enumerate() {
        w.write_record([
            k.to_string(),
            i.to_string(),
            tt.to_string(),
            periods[tt].year.to_string(),
            periods[tt].month.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(LGCP_LAMBDA_CSV))?;
    w.write_record(["draw", "target_index", "lambda"])?;
    let k = chain.targets.len();
    for (idx, v) in chain.target_lambda.iter().enumerate() {
        w.write_record([
            (idx / k.max(1)).to_string(),
            (idx % k.max(1)).to_string(),
            v.to_string(),
        ])?;
    }
    w.flush()?;

    save_meta(
        &dir.join(LGCP_META_CSV),
        &[
            ("n", chain.n.to_string()),
            ("t", chain.t.to_string()),
            ("clamp_events", chain.clamp_events.to_string()),
            ("accept_phi", chain.accept_phi.to_string()),
            ("attempt_phi", chain.attempt_phi.to_string()),
            ("accept_r", chain.accept_r.to_string()),
            ("attempt_r", chain.attempt_r.to_string()),
        ],
    )
}

pub fn load_lgcp_chain(dir: &Path) -> Result<LgcpChain> {
    let meta = load_meta(&dir.join(LGCP_META_CSV))?;
    let path = dir.join(LGCP_DRAWS_CSV);
    let mut reader = open_reader(&path)?;
    let p = reader.headers()?.iter().filter(|h| h.starts_with("beta")).count();
    let mut draws = Vec::new();
    for record in reader.records() {
        let record = record?;
        let mut beta = Vec::with_capacity(p);
        for j in 0..p {
            beta.push(parse_f64(&path, &record, 3 + j)?);
        }
        draws.push(LgcpDraw {
            phi: parse_f64(&path, &record, 1)?,
            r: parse_f64(&path, &record, 2)?,
            beta,
        });
    }

    let path = dir.join(LGCP_TARGETS_CSV);
    let mut reader = open_reader(&path)?;
    expect_header(&path, &mut reader, &["target_index", "pixel_id", "period", "year", "month"])?;
    let mut targets = Vec::new();
    for record in reader.records() {
        let record = record?;
        targets.push((parse_usize(&path, &record, 1)?, parse_usize(&path, &record, 2)?));
    }

    let path = dir.join(LGCP_LAMBDA_CSV);
    let mut reader = open_reader(&path)?;
    expect_header(&path, &mut reader, &["draw", "target_index", "lambda"])?;
    let mut target_lambda = Vec::new();
    for record in reader.records() {
        let record = record?;
        target_lambda.push(parse_f64(&path, &record, 2)?);
    }
    if target_lambda.len() != draws.len() * targets.len() {
        return Err(Error::DataIntegrity(format!(
            "{} rows do not tile draws x targets",
            path.display()
        )));
    }

    Ok(LgcpChain {
        n: meta_usize(&meta, "n")?,
        t: meta_usize(&meta, "t")?,
        draws,
        targets,
        target_lambda,
        clamp_events: meta_u64(&meta, "clamp_events")?,
        accept_phi: meta_u64(&meta, "accept_phi")?,
        attempt_phi: meta_u64(&meta, "attempt_phi")?,
        accept_r: meta_u64(&meta, "accept_r")?,
        attempt_r: meta_u64(&meta, "attempt_r")?,
    })
}

// ----------------------------------------------------------------- forest

pub fn save_forest(path: &Path, model: &ForestModel) -> Result<()> {
    std::fs::write(path, forest_to_text(model))?;
    Ok(())
}

pub fn load_forest(path: &Path) -> Result<ForestModel> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )));
    }
    forest_from_text(&std::fs::read_to_string(path)?)
}

// ------------------------------------------------------------------- mask

pub fn save_mask(dir: &Path, mask: &MaskPattern, periods: &[PeriodLabel]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(MASK_CSV))?;
    w.write_record(["pixel_id", "period", "year", "month", "variable"])?;
    for cell in &mask.cells {
        w.write_record([
            cell.pixel.to_string(),
            cell.period.to_string(),
            periods[cell.period].year.to_string(),
            periods[cell.period].month.to_string(),
            cell.variable.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    let pairs: Vec<String> = mask.pairs.iter().map(|&(d, t)| format!("{d}>{t}")).collect();
    save_meta(
        &dir.join(MASK_META_CSV),
        &[("scheme", mask.scheme.as_str().to_string()), ("pairs", pairs.join(" "))],
    )
}

pub fn load_mask(dir: &Path) -> Result<MaskPattern> {
    let meta = load_meta(&dir.join(MASK_META_CSV))?;
    let scheme: CvScheme = meta_str(&meta, "scheme")?.parse()?;
    let pairs_text = meta_str(&meta, "pairs")?;
    let mut pairs = Vec::new();
    for part in pairs_text.split_whitespace() {
        let (d, t) = part
            .split_once('>')
            .ok_or_else(|| Error::DataIntegrity(format!("bad mask pair {part:?}")))?;
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::DataIntegrity(format!("bad mask pair {part:?}")))
        };
        pairs.push((parse(d)?, parse(t)?));
    }
    let path = dir.join(MASK_CSV);
    let mut reader = open_reader(&path)?;
    expect_header(&path, &mut reader, &["pixel_id", "period", "year", "month", "variable"])?;
    let mut cells = Vec::new();
    for record in reader.records() {
        let record = record?;
        cells.push(MaskCell {
            pixel: parse_usize(&path, &record, 0)?,
            period: parse_usize(&path, &record, 1)?,
            variable: parse_variable(&path, &record, 4)?,
        });
    }
    Ok(MaskPattern { scheme, pairs, cells })
}

// ------------------------------------------------------------ predictions

/// Wide rows `variable,pixel_id,period,year,month,c0..c{m-1}`: one
/// predictive CDF per held-out cell on its 28-point threshold grid.
pub fn save_predictions(
    path: &Path,
    rows: &[(Variable, PredictiveCdf)],
    periods: &[PeriodLabel],
) -> Result<()> {
    let m = rows.first().map(|(_, p)| p.values.len()).unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut header =
        vec!["variable".to_string(), "pixel_id".into(), "period".into(), "year".into(), "month".into()];
    header.extend((0..m).map(|j| format!("c{j}")));
    w.write_record(&header)?;
    for (variable, pred) in rows {
        if pred.values.len() != m {
            return Err(Error::Dimension(format!(
                "prediction rows mix grid sizes {m} and {}",
                pred.values.len()
            )));
        }
        let mut row = vec![
            variable.as_str().to_string(),
            pred.pixel.to_string(),
            pred.period.to_string(),
            periods[pred.period].year.to_string(),
            periods[pred.period].month.to_string(),
        ];
        row.extend(pred.values.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<(Variable, PredictiveCdf)>> {
    let mut reader = open_reader(path)?;
    let m = reader.headers()?.len().saturating_sub(5);
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let mut values = Vec::with_capacity(m);
        for j in 0..m {
            values.push(parse_f64(path, &record, 5 + j)?);
        }
        rows.push((
            parse_variable(path, &record, 0)?,
            PredictiveCdf {
                pixel: parse_usize(path, &record, 1)?,
                period: parse_usize(path, &record, 2)?,
                values,
            },
        ));
    }
    Ok(rows)
}

// ----------------------------------------------------------------- scores

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub model: String,
    pub scheme: String,
    pub variable: Variable,
    /// Number of held-out cells behind the score.
    pub cells: usize,
    pub score: f64,
}

pub fn save_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "scheme", "variable", "cells", "score"])?;
    for row in rows {
        w.write_record([
            row.model.clone(),
            row.scheme.clone(),
            row.variable.as_str().to_string(),
            row.cells.to_string(),
            row.score.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut reader = open_reader(path)?;
    expect_header(path, &mut reader, &["model", "scheme", "variable", "cells", "score"])?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows.push(ScoreRow {
            model: field(path, &record, 0)?.to_string(),
            scheme: field(path, &record, 1)?.to_string(),
            variable: parse_variable(path, &record, 2)?,
            cells: parse_usize(path, &record, 3)?,
            score: parse_f64(path, &record, 4)?,
        });
    }
    Ok(rows)
}

/// Fixed-width comparison table; lower scores are better.
pub fn format_report(rows: &[ScoreRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:<14} {:<9} {:>7} {:>14}", "model", "scheme", "variable", "cells", "score");
    for row in rows {
        let _ = writeln!(
            out,
            "{:<12} {:<14} {:<9} {:>7} {:>14.6}",
            row.model,
            row.scheme,
            row.variable.as_str(),
            row.cells,
            row.score
        );
    }
    out
}

// --------------------------------------------------------------- manifest

/// `key,value` rows identifying a run: subcommand, config hash, seed, and
/// a SHA-256 per input file. Identical manifests imply identical outputs
/// in single-thread mode.
pub fn write_manifest(
    dir: &Path,
    subcommand: &str,
    config_hash: &str,
    seed: u64,
    inputs: &[&Path],
) -> Result<()> {
    let mut entries = vec![
        ("subcommand".to_string(), subcommand.to_string()),
        ("config_sha256".to_string(), config_hash.to_string()),
        ("seed".to_string(), seed.to_string()),
    ];
    for input in inputs {
        entries.push((format!("sha256:{}", input.display()), file_sha256(input)?));
    }
    let pairs: Vec<(&str, String)> =
        entries.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    save_meta(&dir.join(manifest_csv(subcommand)), &pairs)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

// -------------------------------------------------------------- meta csv

fn save_meta(path: &Path, pairs: &[(&str, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["key", "value"])?;
    for (k, v) in pairs {
        w.write_record([*k, v.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut reader = open_reader(path)?;
    expect_header(path, &mut reader, &["key", "value"])?;
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        out.insert(field(path, &record, 0)?.to_string(), field(path, &record, 1)?.to_string());
    }
    Ok(out)
}

fn meta_str<'a>(meta: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::DataIntegrity(format!("meta key {key} missing")))
}

fn meta_usize(meta: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    meta_str(meta, key)?
        .parse()
        .map_err(|_| Error::DataIntegrity(format!("meta key {key} is not an integer")))
}

fn meta_u64(meta: &BTreeMap<String, String>, key: &str) -> Result<u64> {
    meta_str(meta, key)?
        .parse()
        .map_err(|_| Error::DataIntegrity(format!("meta key {key} is not an integer")))
}

// ------------------------------------------------------------ checkpoints

/// Bit-exact text state dumps. Scalars and vectors are IEEE hex words;
/// the header binds the checkpoint to its seed and config so a resume
/// with different settings is refused instead of silently diverging.
struct FieldWriter {
    out: String,
}

impl FieldWriter {
    fn new(kind: &str, seed: u64, config_hash: &str) -> FieldWriter {
        let mut w = FieldWriter { out: String::new() };
        w.str_field("format", kind);
        w.u64_field("seed", seed);
        w.str_field("config", config_hash);
        w
    }

    fn str_field(&mut self, name: &str, v: &str) {
        let _ = writeln!(self.out, "{name} = {v}");
    }

    fn u64_field(&mut self, name: &str, v: u64) {
        let _ = writeln!(self.out, "{name} = {v}");
    }

    fn f64_field(&mut self, name: &str, v: f64) {
        let _ = writeln!(self.out, "{name} = {}", fmt_hex_f64(v));
    }

    fn vec_field(&mut self, name: &str, values: &[f64]) {
        let words: Vec<String> = values.iter().map(|&v| fmt_hex_f64(v)).collect();
        let _ = writeln!(self.out, "{name} = {}", words.join(" "));
    }

    fn cells_field(&mut self, name: &str, cells: &[(usize, usize)]) {
        let words: Vec<String> = cells.iter().map(|&(i, t)| format!("{i}:{t}")).collect();
        let _ = writeln!(self.out, "{name} = {}", words.join(" "));
    }
}

struct FieldReader {
    map: BTreeMap<String, String>,
}

impl FieldReader {
    fn parse(path: &Path, kind: &str, seed: u64, config_hash: &str) -> Result<FieldReader> {
        if !path.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} not found", path.display()),
            )));
        }
        let text = std::fs::read_to_string(path)?;
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (name, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(path, lineno + 1, "expected name = value"))?;
            map.insert(name.trim().to_string(), value.trim().to_string());
        }
        let reader = FieldReader { map };
        if reader.str_field("format")? != kind {
            return Err(Error::Config(format!(
                "{} is not a {kind} checkpoint",
                path.display()
            )));
        }
        if reader.u64_field("seed")? != seed {
            return Err(Error::Config(format!(
                "checkpoint {} was written under seed {}, run uses {seed}",
                path.display(),
                reader.u64_field("seed")?
            )));
        }
        if reader.str_field("config")? != config_hash {
            return Err(Error::Config(format!(
                "checkpoint {} was written under a different config",
                path.display()
            )));
        }
        Ok(reader)
    }

    fn str_field(&self, name: &str) -> Result<&str> {
        self.map
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| Error::DataIntegrity(format!("checkpoint field {name} missing")))
    }

    fn u64_field(&self, name: &str) -> Result<u64> {
        self.str_field(name)?
            .parse()
            .map_err(|_| Error::DataIntegrity(format!("checkpoint field {name} is not an integer")))
    }

    fn usize_field(&self, name: &str) -> Result<usize> {
        Ok(self.u64_field(name)? as usize)
    }

    fn f64_field(&self, name: &str) -> Result<f64> {
        parse_hex_f64(self.str_field(name)?)
            .ok_or_else(|| Error::DataIntegrity(format!("checkpoint field {name} is not hex")))
    }

    fn vec_field(&self, name: &str) -> Result<Vec<f64>> {
        self.str_field(name)?
            .split_whitespace()
            .map(|w| {
                parse_hex_f64(w).ok_or_else(|| {
                    Error::DataIntegrity(format!("checkpoint field {name} holds a bad word"))
                })
            })
            .collect()
    }

    fn cells_field(&self, name: &str) -> Result<Vec<(usize, usize)>> {
        self.str_field(name)?
            .split_whitespace()
            .map(|w| {
                let bad =
                    || Error::DataIntegrity(format!("checkpoint field {name} holds a bad cell"));
                let (i, t) = w.split_once(':').ok_or_else(bad)?;
                Ok((i.parse().map_err(|_| bad())?, t.parse().map_err(|_| bad())?))
            })
            .collect()
    }
}

pub fn save_stage1_run(path: &Path, run: &Stage1Run, seed: u64, config_hash: &str) -> Result<()> {
    let mut w = FieldWriter::new("stage1", seed, config_hash);
    w.u64_field("next_iter", run.next_iter);
    w.u64_field("n", run.chain.n as u64);
    w.u64_field("t", run.chain.t as u64);
    w.vec_field("state.x", &run.state.x);
    w.vec_field("state.mu_z", &run.state.mu_z);
    w.vec_field("state.theta", &run.state.theta);
    w.f64_field("state.tau", run.state.tau);
    w.vec_field("state.eps", &run.state.eps);
    w.f64_field("state.phi", run.state.phi);
    w.f64_field("state.r", run.state.r);
    w.vec_field("state.gamma", &run.state.gamma);
    w.f64_field("state.s_phi", run.state.s_phi);
    w.f64_field("state.s_r", run.state.s_r);
    w.cells_field("chain.missing_cells", &run.chain.missing_cells);
    w.vec_field("chain.cond_prob_sum", &run.chain.cond_prob_sum);
    w.u64_field("chain.cond_draws", run.chain.cond_draws as u64);
    w.u64_field("chain.accept_phi", run.chain.accept_phi);
    w.u64_field("chain.attempt_phi", run.chain.attempt_phi);
    w.u64_field("chain.accept_r", run.chain.accept_r);
    w.u64_field("chain.attempt_r", run.chain.attempt_r);
    w.u64_field("chain.draws", run.chain.draws.len() as u64);
    for (d, draw) in run.chain.draws.iter().enumerate() {
        w.vec_field(&format!("draw.{d}.mu_z"), &draw.mu_z);
        w.vec_field(&format!("draw.{d}.theta"), &draw.theta);
        w.f64_field(&format!("draw.{d}.tau"), draw.tau);
        w.f64_field(&format!("draw.{d}.phi"), draw.phi);
        w.f64_field(&format!("draw.{d}.r"), draw.r);
        w.vec_field(&format!("draw.{d}.gamma"), &draw.gamma);
    }
    std::fs::write(path, w.out)?;
    Ok(())
}

pub fn load_stage1_run(path: &Path, seed: u64, config_hash: &str) -> Result<Stage1Run> {
    let r = FieldReader::parse(path, "stage1", seed, config_hash)?;
    let mut draws = Vec::new();
    for d in 0..r.u64_field("chain.draws")? {
        draws.push(Stage1Draw {
            mu_z: r.vec_field(&format!("draw.{d}.mu_z"))?,
            theta: r.vec_field(&format!("draw.{d}.theta"))?,
            tau: r.f64_field(&format!("draw.{d}.tau"))?,
            phi: r.f64_field(&format!("draw.{d}.phi"))?,
            r: r.f64_field(&format!("draw.{d}.r"))?,
            gamma: r.vec_field(&format!("draw.{d}.gamma"))?,
        });
    }
    Ok(Stage1Run {
        state: Stage1State {
            x: r.vec_field("state.x")?,
            mu_z: r.vec_field("state.mu_z")?,
            theta: r.vec_field("state.theta")?,
            tau: r.f64_field("state.tau")?,
            eps: r.vec_field("state.eps")?,
            phi: r.f64_field("state.phi")?,
            r: r.f64_field("state.r")?,
            gamma: r.vec_field("state.gamma")?,
            s_phi: r.f64_field("state.s_phi")?,
            s_r: r.f64_field("state.s_r")?,
        },
        next_iter: r.u64_field("next_iter")?,
        chain: Stage1Chain {
            n: r.usize_field("n")?,
            t: r.usize_field("t")?,
            draws,
            missing_cells: r.cells_field("chain.missing_cells")?,
            cond_prob_sum: r.vec_field("chain.cond_prob_sum")?,
            cond_draws: r.usize_field("chain.cond_draws")?,
            accept_phi: r.u64_field("chain.accept_phi")?,
            attempt_phi: r.u64_field("chain.attempt_phi")?,
            accept_r: r.u64_field("chain.accept_r")?,
            attempt_r: r.u64_field("chain.attempt_r")?,
        },
    })
}

pub fn save_stage3_run(path: &Path, run: &Stage3Run, seed: u64, config_hash: &str) -> Result<()> {
    let mut w = FieldWriter::new("stage3", seed, config_hash);
    w.u64_field("next_iter", run.next_iter);
    w.u64_field("n", run.chain.n as u64);
    w.u64_field("t", run.chain.t as u64);
    w.vec_field("state.w", &run.state.w);
    w.vec_field("state.eta", &run.state.eta);
    w.f64_field("state.phi", run.state.phi);
    w.f64_field("state.r", run.state.r);
    w.f64_field("state.rho", run.state.rho);
    w.f64_field("state.s_phi", run.state.s_phi);
    w.f64_field("state.s_r", run.state.s_r);
    w.f64_field("state.s_rho", run.state.s_rho);
    w.cells_field("chain.targets", &run.chain.targets);
    w.u64_field("chain.accept_phi", run.chain.accept_phi);
    w.u64_field("chain.attempt_phi", run.chain.attempt_phi);
    w.u64_field("chain.accept_r", run.chain.accept_r);
    w.u64_field("chain.attempt_r", run.chain.attempt_r);
    w.u64_field("chain.accept_rho", run.chain.accept_rho);
    w.u64_field("chain.attempt_rho", run.chain.attempt_rho);
    w.u64_field("chain.draws", run.chain.draws.len() as u64);
    for (d, draw) in run.chain.draws.iter().enumerate() {
        w.f64_field(&format!("draw.{d}.phi"), draw.phi);
        w.f64_field(&format!("draw.{d}.r"), draw.r);
        w.f64_field(&format!("draw.{d}.rho"), draw.rho);
    }
    let flat: Vec<f64> = run.chain.target_means.iter().flat_map(|m| [m[0], m[1]]).collect();
    w.vec_field("chain.target_means", &flat);
    std::fs::write(path, w.out)?;
    Ok(())
}

pub fn load_stage3_run(path: &Path, seed: u64, config_hash: &str) -> Result<Stage3Run> {
    let r = FieldReader::parse(path, "stage3", seed, config_hash)?;
    let mut draws = Vec::new();
    for d in 0..r.u64_field("chain.draws")? {
        draws.push(Stage3Draw {
            phi: r.f64_field(&format!("draw.{d}.phi"))?,
            r: r.f64_field(&format!("draw.{d}.r"))?,
            rho: r.f64_field(&format!("draw.{d}.rho"))?,
        });
    }
    let flat = r.vec_field("chain.target_means")?;
    if flat.len() % 2 != 0 {
        return Err(Error::DataIntegrity("target_means must hold pairs".into()));
    }
    let target_means: Vec<[f64; 2]> = flat.chunks(2).map(|c| [c[0], c[1]]).collect();
    Ok(Stage3Run {
        state: Stage3State {
            w: r.vec_field("state.w")?,
            eta: r.vec_field("state.eta")?,
            phi: r.f64_field("state.phi")?,
            r: r.f64_field("state.r")?,
            rho: r.f64_field("state.rho")?,
            s_phi: r.f64_field("state.s_phi")?,
            s_r: r.f64_field("state.s_r")?,
            s_rho: r.f64_field("state.s_rho")?,
        },
        next_iter: r.u64_field("next_iter")?,
        chain: Stage3Chain {
            n: r.usize_field("n")?,
            t: r.usize_field("t")?,
            draws,
            targets: r.cells_field("chain.targets")?,
            target_means,
            accept_phi: r.u64_field("chain.accept_phi")?,
            attempt_phi: r.u64_field("chain.attempt_phi")?,
            accept_r: r.u64_field("chain.accept_r")?,
            attempt_r: r.u64_field("chain.attempt_r")?,
            accept_rho: r.u64_field("chain.accept_rho")?,
            attempt_rho: r.u64_field("chain.attempt_rho")?,
        },
    })
}

pub fn save_lgcp_run(path: &Path, run: &LgcpRun, seed: u64, config_hash: &str) -> Result<()> {
    let mut w = FieldWriter::new("lgcp", seed, config_hash);
    w.u64_field("next_iter", run.next_iter);
    w.u64_field("n", run.chain.n as u64);
    w.u64_field("t", run.chain.t as u64);
    w.vec_field("state.lambda", &run.state.lambda);
    w.vec_field("state.beta", &run.state.beta);
    w.vec_field("state.zeta", &run.state.zeta);
    w.f64_field("state.phi", run.state.phi);
    w.f64_field("state.r", run.state.r);
    w.f64_field("state.s_phi", run.state.s_phi);
    w.f64_field("state.s_r", run.state.s_r);
    w.cells_field("chain.targets", &run.chain.targets);
    w.vec_field("chain.target_lambda", &run.chain.target_lambda);
    w.u64_field("chain.clamp_events", run.chain.clamp_events);
    w.u64_field("chain.accept_phi", run.chain.accept_phi);
    w.u64_field("chain.attempt_phi", run.chain.attempt_phi);
    w.u64_field("chain.accept_r", run.chain.accept_r);
    w.u64_field("chain.attempt_r", run.chain.attempt_r);
    w.u64_field("chain.draws", run.chain.draws.len() as u64);
    for (d, draw) in run.chain.draws.iter().enumerate() {
        w.f64_field(&format!("draw.{d}.phi"), draw.phi);
        w.f64_field(&format!("draw.{d}.r"), draw.r);
        w.vec_field(&format!("draw.{d}.beta"), &draw.beta);
    }
    std::fs::write(path, w.out)?;
    Ok(())
}

pub fn load_lgcp_run(path: &Path, seed: u64, config_hash: &str) -> Result<LgcpRun> {
    let r = FieldReader::parse(path, "lgcp", seed, config_hash)?;
    let mut draws = Vec::new();
    for d in 0..r.u64_field("chain.draws")? {
        draws.push(LgcpDraw {
            phi: r.f64_field(&format!("draw.{d}.phi"))?,
            r: r.f64_field(&format!("draw.{d}.r"))?,
            beta: r.vec_field(&format!("draw.{d}.beta"))?,
        });
    }
    Ok(LgcpRun {
        state: LgcpState {
            lambda: r.vec_field("state.lambda")?,
            beta: r.vec_field("state.beta")?,
            zeta: r.vec_field("state.zeta")?,
            phi: r.f64_field("state.phi")?,
            r: r.f64_field("state.r")?,
            s_phi: r.f64_field("state.s_phi")?,
            s_r: r.f64_field("state.s_r")?,
        },
        next_iter: r.u64_field("next_iter")?,
        chain: LgcpChain {
            n: r.usize_field("n")?,
            t: r.usize_field("t")?,
            draws,
            targets: r.cells_field("chain.targets")?,
            target_lambda: r.vec_field("chain.target_lambda")?,
            clamp_events: r.u64_field("chain.clamp_events")?,
            accept_phi: r.u64_field("chain.accept_phi")?,
            attempt_phi: r.u64_field("chain.attempt_phi")?,
            accept_r: r.u64_field("chain.accept_r")?,
            attempt_r: r.u64_field("chain.attempt_r")?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngx::RngLattice;
    use crate::synth::{simulate, SimConfig};
    use tempfile::tempdir;

    fn sim_small() -> (ObservationPanel, SimTruth) {
        let config = SimConfig { nx: 4, ny: 4, t: 14, ..SimConfig::default() };
        simulate(&config, RngLattice::new(3)).unwrap()
    }

    #[test]
    fn panel_round_trips_including_missing_cells() {
        let (panel, _) = sim_small();
        let dir = tempdir().unwrap();
        let path = dir.path().join(PANEL_CSV);
        save_panel(&path, &panel).unwrap();
        let back = load_panel(&path).unwrap();
        assert_eq!(back.n(), panel.n());
        assert_eq!(back.periods(), panel.periods());
        for tt in 0..panel.t() {
            for i in 0..panel.n() {
                assert_eq!(back.ba(i, tt), panel.ba(i, tt));
                assert_eq!(back.cnt(i, tt), panel.cnt(i, tt));
            }
        }
        assert!(panel.missing_ba_count() > 0, "fixture should exercise NA cells");
    }

    #[test]
    fn panel_loader_rejects_ragged_and_inconsistent_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let header = "pixel_id,lon,lat,year,month,cnt,ba\n";
        // Pixel 1 missing from the second period.
        std::fs::write(
            &path,
            format!("{header}0,0,0,1993,3,1,2.5\n1,1,0,1993,3,0,0\n0,0,0,1993,4,1,2.5\n"),
        )
        .unwrap();
        assert!(load_panel(&path).is_err());
        // Same pixel at two locations.
        std::fs::write(
            &path,
            format!("{header}0,0,0,1993,3,1,2.5\n1,1,0,1993,3,0,0\n0,0,9,1993,4,1,2.5\n1,1,0,1993,4,0,0\n"),
        )
        .unwrap();
        assert!(load_panel(&path).is_err());
        // Duplicate cell.
        std::fs::write(&path, format!("{header}0,0,0,1993,3,1,2.5\n0,0,0,1993,3,1,2.5\n")).unwrap();
        assert!(load_panel(&path).is_err());
    }

    #[test]
    fn truth_round_trips_bit_for_bit() {
        let (panel, truth) = sim_small();
        let dir = tempdir().unwrap();
        let path = dir.path().join(TRUTH_CSV);
        save_truth(&path, &truth, panel.periods()).unwrap();
        let back = load_truth(&path, panel.periods()).unwrap();
        assert_eq!(back, truth);
    }

    #[test]
    fn mesh_round_trips_through_from_parts() {
        let (panel, _) = sim_small();
        let mesh = crate::synth::panel_mesh(&panel, &crate::mesh::MeshConfig::default()).unwrap();
        let dir = tempdir().unwrap();
        let nodes = dir.path().join(MESH_NODES_CSV);
        let tris = dir.path().join(MESH_TRIANGLES_CSV);
        save_mesh(&nodes, &tris, &mesh).unwrap();
        let back = load_mesh(&nodes, &tris).unwrap();
        assert_eq!(back.nodes(), mesh.nodes());
        assert_eq!(back.triangles(), mesh.triangles());
    }

    #[test]
    fn surfaces_round_trip() {
        let surfaces = Surfaces {
            mu1: vec![0.25, -1.5, 3.0],
            sigma1: vec![1.0, 0.5, 2.0],
            mu2: vec![0.1, 0.2, 0.3],
            sigma2: vec![0.9, 1.1, 1.3],
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join(SURFACES_CSV);
        save_surfaces(&path, &surfaces).unwrap();
        let back = load_surfaces(&path).unwrap();
        assert_eq!(back.mu1, surfaces.mu1);
        assert_eq!(back.sigma1, surfaces.sigma1);
        assert_eq!(back.mu2, surfaces.mu2);
        assert_eq!(back.sigma2, surfaces.sigma2);
    }

    fn fake_stage1_chain() -> Stage1Chain {
        Stage1Chain {
            n: 3,
            t: 2,
            draws: vec![
                Stage1Draw {
                    mu_z: vec![0.1, -0.2, 0.3],
                    theta: vec![1.0; 6],
                    tau: 2.5,
                    phi: 1.25,
                    r: 0.5,
                    gamma: vec![],
                },
                Stage1Draw {
                    mu_z: vec![0.4, 0.5, -0.625],
                    theta: vec![0.5; 6],
                    tau: 3.5,
                    phi: 1.5,
                    r: 0.25,
                    gamma: vec![],
                },
            ],
            missing_cells: vec![(1, 0), (2, 1)],
            cond_prob_sum: vec![1.25, 0.75],
            cond_draws: 2,
            accept_phi: 5,
            attempt_phi: 9,
            accept_r: 4,
            attempt_r: 9,
        }
    }

    #[test]
    fn stage1_chain_round_trips() {
        let chain = fake_stage1_chain();
        let periods = crate::synth::season_labels(1993, 2);
        let dir = tempdir().unwrap();
        save_stage1_chain(dir.path(), &chain, &periods).unwrap();
        let back = load_stage1_chain(dir.path()).unwrap();
        assert_eq!(back, chain);
    }

    #[test]
    fn stage3_and_lgcp_chains_round_trip() {
        let periods = crate::synth::season_labels(1993, 2);
        let chain = Stage3Chain {
            n: 3,
            t: 2,
            draws: vec![
                Stage3Draw { phi: 1.0, r: 0.5, rho: 0.25 },
                Stage3Draw { phi: 2.0, r: 0.75, rho: 0.5 },
            ],
            targets: vec![(0, 1), (2, 0)],
            target_means: vec![[0.1, 0.2], [0.3, 0.4], [0.5, 0.6], [0.7, 0.8]],
            accept_phi: 1,
            attempt_phi: 2,
            accept_r: 3,
            attempt_r: 4,
            accept_rho: 5,
            attempt_rho: 6,
        };
        let dir = tempdir().unwrap();
        save_stage3_chain(dir.path(), &chain, &periods).unwrap();
        assert_eq!(load_stage3_chain(dir.path()).unwrap(), chain);

        let lgcp = LgcpChain {
            n: 3,
            t: 2,
            draws: vec![
                LgcpDraw { phi: 1.0, r: 0.5, beta: vec![0.25] },
                LgcpDraw { phi: 1.5, r: 0.25, beta: vec![-0.5] },
            ],
            targets: vec![(1, 1)],
            target_lambda: vec![0.125, -0.25],
            clamp_events: 7,
            accept_phi: 1,
            attempt_phi: 2,
            accept_r: 3,
            attempt_r: 4,
        };
        save_lgcp_chain(dir.path(), &lgcp, &periods).unwrap();
        assert_eq!(load_lgcp_chain(dir.path()).unwrap(), lgcp);
    }

    #[test]
    fn mask_and_predictions_and_scores_round_trip() {
        let periods = crate::synth::season_labels(1993, 4);
        let mask = MaskPattern {
            scheme: CvScheme::FixedMonth,
            pairs: vec![(2, 0), (3, 1)],
            cells: vec![
                MaskCell { pixel: 0, period: 0, variable: Variable::Ba },
                MaskCell { pixel: 5, period: 1, variable: Variable::Cnt },
            ],
        };
        let dir = tempdir().unwrap();
        save_mask(dir.path(), &mask, &periods).unwrap();
        let back = load_mask(dir.path()).unwrap();
        assert_eq!(back.scheme, mask.scheme);
        assert_eq!(back.pairs, mask.pairs);
        assert_eq!(back.cells, mask.cells);

        let rows = vec![
            (
                Variable::Ba,
                PredictiveCdf { pixel: 0, period: 0, values: vec![0.25, 0.5, 1.0] },
            ),
            (
                Variable::Cnt,
                PredictiveCdf { pixel: 5, period: 1, values: vec![0.1, 0.2, 0.3] },
            ),
        ];
        let path = dir.path().join(predictions_csv("pipeline"));
        save_predictions(&path, &rows, &periods).unwrap();
        let loaded = load_predictions(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for ((va, pa), (vb, pb)) in loaded.iter().zip(&rows) {
            assert_eq!(va, vb);
            assert_eq!((pa.pixel, pa.period), (pb.pixel, pb.period));
            assert_eq!(pa.values, pb.values);
        }

        let scores = vec![
            ScoreRow {
                model: "pipeline".into(),
                scheme: "fixed-month".into(),
                variable: Variable::Ba,
                cells: 40,
                score: 0.125,
            },
            ScoreRow {
                model: "benchmark".into(),
                scheme: "fixed-month".into(),
                variable: Variable::Cnt,
                cells: 40,
                score: 0.25,
            },
        ];
        let path = dir.path().join(SCORES_CSV);
        save_scores(&path, &scores).unwrap();
        assert_eq!(load_scores(&path).unwrap(), scores);
        let report = format_report(&scores);
        assert!(report.contains("pipeline"));
        assert!(report.contains("0.250000"));
    }

    #[test]
    fn forest_file_round_trips() {
        use crate::forest::{train_forest, FeatureTable, ForestConfig};
        let rows = 30;
        let data: Vec<f64> = (0..rows * 2).map(|k| (k % 7) as f64).collect();
        let features = FeatureTable::new(rows, 2, data).unwrap();
        let labels: Vec<usize> = (0..rows).map(|k| k % 3).collect();
        let model = train_forest(
            &features,
            &labels,
            3,
            &ForestConfig { ntree: 5, mtry: None, min_leaf: 1 },
            RngLattice::new(4),
        )
        .unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join(FOREST_TXT);
        save_forest(&path, &model).unwrap();
        assert_eq!(load_forest(&path).unwrap(), model);
    }

    #[test]
    fn stage1_checkpoint_round_trips_and_checks_identity() {
        let chain = fake_stage1_chain();
        let run = Stage1Run {
            state: Stage1State {
                x: vec![0.5; 6],
                mu_z: vec![0.1, 0.2, 0.3],
                theta: vec![1.0; 6],
                tau: 2.0,
                eps: vec![0.25; 8],
                phi: 1.5,
                r: 0.5,
                gamma: vec![],
                s_phi: 0.3,
                s_r: 0.31,
            },
            next_iter: 120,
            chain,
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join(STAGE1_CHECKPOINT);
        save_stage1_run(&path, &run, 17, "abc").unwrap();
        let back = load_stage1_run(&path, 17, "abc").unwrap();
        assert_eq!(back.state, run.state);
        assert_eq!(back.next_iter, run.next_iter);
        assert_eq!(back.chain, run.chain);
        assert!(load_stage1_run(&path, 18, "abc").is_err());
        assert!(load_stage1_run(&path, 17, "zzz").is_err());
    }

    #[test]
    fn stage3_and_lgcp_checkpoints_round_trip() {
        let run = Stage3Run {
            state: Stage3State {
                w: vec![0.1; 12],
                eta: vec![-0.5; 16],
                phi: 2.0,
                r: 0.5,
                rho: 0.25,
                s_phi: 0.3,
                s_r: 0.3,
                s_rho: 0.29,
            },
            next_iter: 64,
            chain: Stage3Chain {
                n: 3,
                t: 2,
                draws: vec![Stage3Draw { phi: 1.0, r: 0.5, rho: 0.125 }],
                targets: vec![(1, 0)],
                target_means: vec![[0.5, -0.5]],
                accept_phi: 1,
                attempt_phi: 3,
                accept_r: 2,
                attempt_r: 3,
                accept_rho: 1,
                attempt_rho: 3,
            },
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join(STAGE3_CHECKPOINT);
        save_stage3_run(&path, &run, 5, "h").unwrap();
        let back = load_stage3_run(&path, 5, "h").unwrap();
        assert_eq!(back.state, run.state);
        assert_eq!(back.chain, run.chain);

        let lrun = LgcpRun {
            state: LgcpState {
                lambda: vec![0.1; 6],
                beta: vec![1.5],
                zeta: vec![0.2; 8],
                phi: 1.0,
                r: 0.5,
                s_phi: 0.3,
                s_r: 0.3,
            },
            next_iter: 10,
            chain: LgcpChain {
                n: 3,
                t: 2,
                draws: vec![LgcpDraw { phi: 1.0, r: 0.5, beta: vec![1.5] }],
                targets: vec![(0, 0)],
                target_lambda: vec![0.75],
                clamp_events: 0,
                accept_phi: 1,
                attempt_phi: 1,
                accept_r: 0,
                attempt_r: 1,
            },
        };
        let path = dir.path().join(LGCP_CHECKPOINT);
        save_lgcp_run(&path, &lrun, 5, "h").unwrap();
        let back = load_lgcp_run(&path, 5, "h").unwrap();
        assert_eq!(back.state, lrun.state);
        assert_eq!(back.chain, lrun.chain);
    }

    #[test]
    fn manifest_records_input_hashes() {
        let dir = tempdir().unwrap();
        let input = dir.path().join("input.csv");
        std::fs::write(&input, "a,b\n1,2\n").unwrap();
        write_manifest(dir.path(), "fit-stage1", "cafe", 9, &[&input]).unwrap();
        let meta = load_meta(&dir.path().join(manifest_csv("fit-stage1"))).unwrap();
        assert_eq!(meta["subcommand"], "fit-stage1");
        assert_eq!(meta["config_sha256"], "cafe");
        assert_eq!(meta["seed"], "9");
        let key = format!("sha256:{}", input.display());
        assert_eq!(meta[&key], file_sha256(&input).unwrap());
        assert_eq!(meta[&key].len(), 64);
    }
}
