//! CSV emission and parsing for run outputs.
//!
//! All files are plain numeric CSV with fixed headers. Floats are written
//! with Rust's shortest round-trip formatting, so re-running a command on the
//! same inputs produces byte-identical files.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use invdyn_core::data::{AccelKind, DataSource, Dataset, StepTrace};
use invdyn_core::experiment::{
    AggregateGroup, AggregateRow, ExperimentConfig, IterationRecord, RunMetrics,
};

/// Per-run metrics file: one row per learning iteration.
pub const METRICS_HEADER: &str =
    "iteration,pos_err_mean,fb_mag_mean,accel_err_mean,converged,steps";

/// Aggregate file: one row per (group, iteration).
pub const AGGREGATE_HEADER: &str = "group,iteration,n_runs,n_excluded,pos_err_mean,pos_err_std,\
fb_mag_mean,fb_mag_std,accel_err_mean,accel_err_std";

/// Plot-data files: position error and feedback magnitude curves per group.
pub const PLOT_HEADER: &str =
    "iteration,pos_err_mean,pos_err_mean_plus_std,fb_mag_mean,fb_mag_mean_plus_std";

pub fn write_metrics_csv(path: &Path, records: &[IterationRecord]) -> io::Result<()> {
    let mut out = String::new();
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration,
            r.pos_err_mean,
            r.fb_mag_mean,
            r.accel_err_mean,
            r.converged as u8,
            r.steps_used
        ));
    }
    fs::write(path, out)
}

pub fn read_metrics_csv(path: &Path) -> io::Result<Vec<IterationRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == METRICS_HEADER => {}
        other => {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unexpected metrics header {other:?} in {}", path.display()),
            ))
        }
    }
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("bad metrics row {} in {}", idx + 2, path.display()),
            ));
        }
        let parse_err = |what: &str| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("bad {what} in row {} of {}", idx + 2, path.display()),
            )
        };
        records.push(IterationRecord {
            iteration: fields[0].parse().map_err(|_| parse_err("iteration"))?,
            pos_err_mean: fields[1].parse().map_err(|_| parse_err("pos_err_mean"))?,
            fb_mag_mean: fields[2].parse().map_err(|_| parse_err("fb_mag_mean"))?,
            accel_err_mean: fields[3].parse().map_err(|_| parse_err("accel_err_mean"))?,
            converged: fields[4] == "1",
            steps_used: fields[5].parse().map_err(|_| parse_err("steps"))?,
            aborted: false,
            dataset_size: 0,
            train_loss_before: None,
            train_loss_after: None,
        });
    }
    Ok(records)
}

/// Columns identifying a sweep cell in the index file.
pub const INDEX_HEADER: &str =
    "run,noise,friction,stiction,controller,gain,source,epochs,n_iterations,horizon,seed,aborted";

pub fn index_row(run: &str, cell: &ExperimentConfig, aborted: bool) -> String {
    format!(
        "{run},{},{},{},{},{},{},{},{},{},{},{}",
        cell.noise_level.name(),
        cell.friction_level.name(),
        cell.stiction_level.name(),
        cell.controller.name(),
        cell.gain_setting.name(),
        cell.data_source.name(),
        cell.epochs,
        cell.n_iterations,
        cell.horizon,
        cell.seed,
        aborted as u8
    )
}

fn parse_cell(fields: &[&str]) -> Option<ExperimentConfig> {
    use invdyn_core::experiment::{
        ControllerKind, FrictionLevel, GainSetting, NoiseLevel, StictionLevel,
    };
    let noise = NoiseLevel::ALL.iter().find(|l| l.name() == fields[0])?;
    let friction = FrictionLevel::ALL.iter().find(|l| l.name() == fields[1])?;
    let stiction = StictionLevel::ALL.iter().find(|l| l.name() == fields[2])?;
    let controller = ControllerKind::ALL.iter().find(|l| l.name() == fields[3])?;
    let gain = GainSetting::ALL.iter().find(|l| l.name() == fields[4])?;
    let source = DataSource::ALL.iter().find(|l| l.name() == fields[5])?;
    Some(ExperimentConfig {
        noise_level: *noise,
        friction_level: *friction,
        stiction_level: *stiction,
        controller: *controller,
        gain_setting: *gain,
        data_source: *source,
        epochs: fields[6].parse().ok()?,
        n_iterations: fields[7].parse().ok()?,
        horizon: fields[8].parse().ok()?,
        seed: fields[9].parse().ok()?,
    })
}

/// Load a sweep output directory back into run metrics for aggregation.
pub fn read_sweep_dir(dir: &Path) -> io::Result<Vec<RunMetrics>> {
    let index = fs::read_to_string(dir.join("index.csv"))?;
    let mut lines = index.lines();
    match lines.next() {
        Some(h) if h == INDEX_HEADER => {}
        other => {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unexpected index header {other:?}"),
            ))
        }
    }
    let mut runs = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("bad index row: {line}"),
            ));
        }
        let cell = parse_cell(&fields[1..11]).ok_or_else(|| {
            io::Error::new(io::ErrorKind::InvalidData, format!("bad cell in row: {line}"))
        })?;
        let aborted = fields[11] == "1";
        let records = read_metrics_csv(&dir.join("runs").join(fields[0]).join("metrics.csv"))?;
        runs.push(RunMetrics {
            cell: Some(cell),
            records,
            aborted,
        });
    }
    Ok(runs)
}

pub fn write_aggregate_csv(path: &Path, groups: &[AggregateGroup]) -> io::Result<()> {
    let mut out = String::new();
    out.push_str(AGGREGATE_HEADER);
    out.push('\n');
    for g in groups {
        for row in &g.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                g.label,
                row.iteration,
                g.n_runs,
                g.n_excluded,
                row.pos_err_mean,
                row.pos_err_std,
                row.fb_mag_mean,
                row.fb_mag_std,
                row.accel_err_mean,
                row.accel_err_std
            ));
        }
    }
    fs::write(path, out)
}

pub fn read_aggregate_csv(path: &Path) -> io::Result<Vec<AggregateGroup>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == AGGREGATE_HEADER => {}
        other => {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unexpected aggregate header {other:?} in {}", path.display()),
            ))
        }
    }
    let mut groups: Vec<AggregateGroup> = Vec::new();
    for line in lines {
        // the group label contains no commas only if aggregation fields do;
        // it is everything up to the first numeric iteration field boundary
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 10 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("bad aggregate row: {line}"),
            ));
        }
        // label may itself contain commas (multi-field group keys): the last
        // nine fields are numeric, the rest is the label
        let tail = &fields[fields.len() - 9..];
        let label = fields[..fields.len() - 9].join(",");
        let bad =
            |what: &str| io::Error::new(io::ErrorKind::InvalidData, format!("bad {what}: {line}"));
        let row = AggregateRow {
            iteration: tail[0].parse().map_err(|_| bad("iteration"))?,
            pos_err_mean: tail[3].parse().map_err(|_| bad("pos_err_mean"))?,
            pos_err_std: tail[4].parse().map_err(|_| bad("pos_err_std"))?,
            fb_mag_mean: tail[5].parse().map_err(|_| bad("fb_mag_mean"))?,
            fb_mag_std: tail[6].parse().map_err(|_| bad("fb_mag_std"))?,
            accel_err_mean: tail[7].parse().map_err(|_| bad("accel_err_mean"))?,
            accel_err_std: tail[8].parse().map_err(|_| bad("accel_err_std"))?,
        };
        let n_runs: usize = tail[1].parse().map_err(|_| bad("n_runs"))?;
        let n_excluded: usize = tail[2].parse().map_err(|_| bad("n_excluded"))?;
        match groups.last_mut() {
            Some(g) if g.label == label => g.rows.push(row),
            _ => groups.push(AggregateGroup {
                label,
                n_runs,
                n_excluded,
                rows: vec![row],
            }),
        }
    }
    Ok(groups)
}

/// File name for one group's plot data.
pub fn plot_file_name(label: &str) -> String {
    let safe: String = label
        .chars()
        .map(|c| match c {
            '=' => '-',
            ',' => '_',
            c if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' => c,
            _ => '_',
        })
        .collect();
    format!("plot_{safe}.csv")
}

/// Emit per-group curve files (iteration, mean, mean plus one std) for the
/// position error and applied feedback magnitude.
pub fn write_plot_data(dir: &Path, groups: &[AggregateGroup]) -> io::Result<Vec<String>> {
    let mut written = Vec::new();
    let mut sorted: Vec<&AggregateGroup> = groups.iter().collect();
    sorted.sort_by(|a, b| a.label.cmp(&b.label));
    for g in sorted {
        let mut out = String::new();
        out.push_str(PLOT_HEADER);
        out.push('\n');
        for row in &g.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.iteration,
                row.pos_err_mean,
                row.pos_err_mean + row.pos_err_std,
                row.fb_mag_mean,
                row.fb_mag_mean + row.fb_mag_std
            ));
        }
        let name = plot_file_name(&g.label);
        fs::write(dir.join(&name), out)?;
        written.push(name);
    }
    Ok(written)
}

/// Dump a dataset as CSV: `t,source,q…,qd…,qdd…,y…`. The step index is
/// recovered from sample order (both builders emit one sample per step in
/// trace order).
pub fn write_dataset_csv(path: &Path, dataset: &Dataset, dim: usize) -> io::Result<()> {
    let mut out = String::new();
    out.push_str("t,source");
    for d in 0..dim {
        out.push_str(&format!(",q{d}"));
    }
    for d in 0..dim {
        out.push_str(&format!(",qd{d}"));
    }
    for d in 0..dim {
        out.push_str(&format!(",qdd{d}"));
    }
    for d in 0..dim {
        out.push_str(&format!(",y{d}"));
    }
    out.push('\n');
    let mut indirect_seen = 0usize;
    let mut direct_seen = 0usize;
    for sample in &dataset.samples {
        let t = match sample.source {
            DataSource::Indirect => {
                indirect_seen += 1;
                indirect_seen - 1
            }
            _ => {
                direct_seen += 1;
                direct_seen - 1
            }
        };
        out.push_str(&format!("{t},{}", sample.source.name()));
        for v in sample.x.q.iter().chain(&sample.x.qd).chain(&sample.x.qdd) {
            out.push_str(&format!(",{v}"));
        }
        for v in &sample.y {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out)
}

/// Optional per-step trace CSV for one episode.
pub fn write_trace_csv(path: &Path, trace: &[StepTrace], dim: usize) -> io::Result<()> {
    let mut file = io::BufWriter::new(fs::File::create(path)?);
    let mut header = String::from("t");
    for (prefix, n) in [
        ("q", dim),
        ("qd", dim),
        ("qdd_d", dim),
        ("qdd_a", dim),
        ("tau_total", dim),
        ("tau_fb_applied", dim),
        ("tau_fb_learner", dim),
        ("f_prev", dim),
    ] {
        for d in 0..n {
            header.push_str(&format!(",{prefix}{d}"));
        }
    }
    writeln!(file, "{header}")?;
    for step in trace {
        debug_assert_eq!(step.x_d.accel_kind, AccelKind::Desired);
        let mut row = format!("{}", step.t);
        let push = |row: &mut String, vs: &[f64]| {
            for v in vs {
                row.push_str(&format!(",{v}"));
            }
        };
        push(&mut row, &step.x_d.q);
        push(&mut row, &step.x_d.qd);
        push(&mut row, &step.x_d.qdd);
        match &step.x_a {
            Some(x_a) => push(&mut row, &x_a.qdd),
            None => {
                for _ in 0..dim {
                    row.push(',');
                }
            }
        }
        push(&mut row, &step.tau_total);
        push(&mut row, &step.tau_fb_applied);
        push(&mut row, &step.tau_fb_learner);
        push(&mut row, &step.f_prev_at_xd);
        writeln!(file, "{row}")?;
    }
    file.flush()
}
