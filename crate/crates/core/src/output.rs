//! File emission: atomic writes, CSV tables and PGM heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::heatmap::AttentionDump;
use crate::eval::kv::KvOutcome;
use crate::eval::EvalReport;
use crate::train::TrainRecord;

/// Writes to a sibling temporary file and renames it into place, so readers
/// never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("output path {} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Six significant digits: fixed notation for moderate magnitudes,
/// scientific otherwise.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let exp = x.abs().log10().floor() as i32;
    // rounding can carry into the next decade (999999.5 -> 1.00000e6)
    let rounded: f64 = format!("{x:.5e}").parse().expect("float");
    let exp = exp.max(rounded.abs().log10().floor() as i32);
    if (-4..6).contains(&exp) {
        format!("{x:.prec$}", prec = (5 - exp) as usize)
    } else {
        format!("{x:.5e}")
    }
}

pub fn ppl_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("window,scale,stride,tokens,mean_nll,perplexity\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.context_window,
            fmt_sig6(r.scale),
            r.stride,
            r.token_count,
            fmt_sig6(r.mean_nll),
            fmt_sig6(r.perplexity)
        );
    }
    s
}

pub fn telemetry_csv(records: &[TrainRecord]) -> String {
    let mut s = String::from("step,loss,g,t,tokens,wall_ms\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step,
            fmt_sig6(r.loss),
            r.scale,
            r.offset,
            r.tokens_seen,
            r.wall_ms
        );
    }
    s
}

/// `answer_found_at` is left empty when the answer never appeared.
pub fn kv_csv(outcomes: &[KvOutcome], window: usize, scale: f64) -> String {
    let mut s = String::from("case_id,window,scale,correct,answer_found_at\n");
    for o in outcomes {
        let found = o.answer_found_at.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            o.case_id,
            window,
            fmt_sig6(scale),
            u8::from(o.correct),
            found
        );
    }
    s
}

/// ASCII graymap with each row scaled so its maximum maps to 255.
pub fn heatmap_pgm(rows: &[Vec<f64>]) -> String {
    let width = rows.first().map_or(0, Vec::len);
    let mut s = format!("P2\n{width} {}\n255\n", rows.len());
    for row in rows {
        let max = row.iter().copied().fold(0.0, f64::max);
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let level = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
                (level.clamp(0.0, 255.0) as u8).to_string()
            })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// Raw attention values, one generated token per line.
pub fn heatmap_values_csv(rows: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|&v| fmt_sig6(v)).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// One line per (layer, generated row): where the attention peaks and how it
/// relates to the ground-truth value span.
pub fn attention_summary_csv(dump: &AttentionDump) -> String {
    let span = &dump.value_span;
    let mut s = String::from(
        "layer,row,token,argmax,peak_start,peak_end,in_value_span,value_span_start,value_span_end,span_concentration\n",
    );
    for h in &dump.layers {
        let conc = h.span_concentration(span);
        for (p, &tok) in h.peaks(span).iter().zip(&dump.generated) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                h.layer,
                p.row,
                tok,
                p.argmax,
                p.peak_interval.start,
                p.peak_interval.end,
                u8::from(p.in_value_span),
                span.start,
                span.end,
                fmt_sig6(conc)
            );
        }
    }
    s
}
