//! File naming, discovery, digests and CSV formatting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use uqcat_core::analysis::{CaseSummary, CorrelationMatrix};

pub fn image_name(subject: usize) -> String {
    format!("sub-{subject}_img.vvol")
}

pub fn label_name(subject: usize) -> String {
    format!("sub-{subject}_lab.vvol")
}

pub fn map_name(subject: usize, case: u8, kind: &str) -> String {
    format!("sub-{subject}_case-{case}_{kind}.vvol")
}

/// Subject indices with an image file in `dir`, ascending.
pub fn find_subjects(dir: &Path) -> io::Result<Vec<usize>> {
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(i) = name
            .strip_prefix("sub-")
            .and_then(|r| r.strip_suffix("_img.vvol"))
            .and_then(|i| i.parse().ok())
        {
            out.insert(i);
        }
    }
    Ok(out.into_iter().collect())
}

/// Entropy maps in `dir`, keyed by subject then case.
pub fn find_entropy_maps(dir: &Path) -> io::Result<BTreeMap<usize, BTreeMap<u8, PathBuf>>> {
    let mut out: BTreeMap<usize, BTreeMap<u8, PathBuf>> = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let parsed = name
            .strip_prefix("sub-")
            .and_then(|r| r.strip_suffix("_ent.vvol"))
            .and_then(|r| r.split_once("_case-"))
            .and_then(|(s, c)| Some((s.parse().ok()?, c.parse().ok()?)));
        if let Some((subject, case)) = parsed {
            out.entry(subject).or_default().insert(case, entry.path());
        }
    }
    Ok(out)
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Digests of every file below `root`, keyed by `/`-separated relative path.
pub fn digest_tree(root: &Path, skip: &[&str]) -> io::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(root)
                .expect("walked below root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            if !skip.contains(&rel.as_str()) {
                out.insert(rel, sha256_file(&path)?);
            }
        }
    }
    Ok(out)
}

/// Six significant digits, plain notation.
pub fn fmt_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v:.5}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let s = format!("{v:.decimals$}");
    // rounding may carry into a new leading digit
    let rounded: f64 = s.parse().expect("formatted float");
    if rounded.abs().log10().floor() as i32 > magnitude && decimals > 0 {
        format!("{v:.prec$}", prec = decimals - 1)
    } else {
        s
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(fmt_sig6).unwrap_or_default()
}

/// Header row of case ids, then one row per case; missing entries empty.
pub fn matrix_csv(m: &CorrelationMatrix) -> String {
    let mut out = String::from("case");
    for l in &m.labels {
        out.push_str(&format!(",{l}"));
    }
    out.push('\n');
    for (i, l) in m.labels.iter().enumerate() {
        out.push_str(&l.to_string());
        for j in 0..m.size() {
            out.push(',');
            out.push_str(&cell(m.get(i, j)));
        }
        out.push('\n');
    }
    out
}

pub fn counts_csv(m: &CorrelationMatrix) -> String {
    let mut out = String::from("case");
    for l in &m.labels {
        out.push_str(&format!(",{l}"));
    }
    out.push('\n');
    let k = m.size();
    for (i, l) in m.labels.iter().enumerate() {
        out.push_str(&l.to_string());
        for c in &m.counts[i * k..(i + 1) * k] {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    out
}

pub fn summary_csv(rows: &[(usize, u8, CaseSummary)]) -> String {
    let mut out = String::from("subject,case,mean_nonzero_entropy,count\n");
    for (subject, case, s) in rows {
        out.push_str(&format!("{subject},{case},{},{}\n", cell(s.mean), s.count));
    }
    out
}
