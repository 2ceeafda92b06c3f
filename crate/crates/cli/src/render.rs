use rrp_core::orchestrator::{ProjectRecord, ResultEntry};
use serde::Serialize;

use crate::Io;

pub fn json(io: &mut Io<'_>, value: &impl Serialize) {
    io.line(serde_json::to_string_pretty(value).expect("domain types serialize"));
}

/// Left-aligned columns separated by two spaces.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i + 1 == cells.len() {
                s.push_str(cell);
            } else {
                s.push_str(&format!("{cell:<w$}  "));
            }
        }
        s.trim_end().to_owned()
    };
    let mut out = vec![line(header.to_vec())];
    out.extend(rows.iter().map(|r| line(r.iter().map(String::as_str).collect())));
    out.join("\n")
}

pub fn projects(records: &[ProjectRecord]) -> String {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.project_id.clone(),
                r.name.clone(),
                r.status.to_string(),
                r.image_ref.as_ref().map(|i| i.to_string()).unwrap_or_else(|| "-".into()),
            ]
        })
        .collect();
    table(&["ID", "NAME", "STATUS", "IMAGE"], &rows)
}

pub fn project(r: &ProjectRecord) -> String {
    let mut lines = vec![
        format!("id:        {}", r.project_id),
        format!("name:      {}", r.name),
        format!("status:    {}", r.status),
        format!("owner:     {}", r.owner),
    ];
    if let Some(commit) = r.commit_id() {
        lines.push(format!("commit:    {commit}"));
    }
    if let Some(image) = &r.image_ref {
        lines.push(format!("image:     {image}"));
    }
    lines.push(format!("resources: {} cpu, {} bytes", r.resources.cpu_cores, r.resources.memory_bytes));
    if let Some(f) = &r.failure {
        lines.push(format!("failure:   {f}"));
    }
    lines.join("\n")
}

pub fn results(entries: &[ResultEntry]) -> String {
    let rows: Vec<Vec<String>> =
        entries.iter().map(|e| vec![e.relative_path.clone(), e.byte_size.to_string(), e.content_hash.clone()]).collect();
    table(&["PATH", "BYTES", "SHA256"], &rows)
}

/// Byte counts with an optional binary suffix: `512M`, `4G`, `1073741824`.
pub fn parse_bytes(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (digits, shift) = match s.char_indices().last() {
        Some((i, c)) if c.is_ascii_alphabetic() => {
            let shift = match c.to_ascii_uppercase() {
                'K' => 10,
                'M' => 20,
                'G' => 30,
                'T' => 40,
                _ => return Err(format!("unknown size suffix in {s:?}")),
            };
            (&s[..i], shift)
        }
        _ => (s, 0),
    };
    let n: u64 = digits.trim().parse().map_err(|_| format!("not a byte count: {s:?}"))?;
    n.checked_shl(shift).filter(|v| v >> shift == n).ok_or_else(|| format!("byte count too large: {s:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_bytes("1024"), Ok(1024));
        assert_eq!(parse_bytes("4G"), Ok(4 << 30));
        assert_eq!(parse_bytes("512m"), Ok(512 << 20));
        assert!(parse_bytes("12X").is_err());
        assert!(parse_bytes("").is_err());
        assert!(parse_bytes("99999999999T").is_err());
    }

    #[test]
    fn tables_align() {
        let t = table(&["ID", "NAME"], &[vec!["p-1".into(), "demo".into()], vec!["p-22".into(), "x".into()]]);
        assert_eq!(t, "ID    NAME\np-1   demo\np-22  x");
    }
}
