//! Startup scripts shipped inside bundles. They need only a container CLI
//! and common system tools, never this platform.

use super::{BundleKind, BundleManifest, ImageSource};

/// Single-quotes `s` for POSIX sh.
fn sh_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Quotes `s` for a PowerShell single-quoted string.
fn ps_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}

pub(crate) fn start_sh(m: &BundleManifest) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        r#"#!/bin/sh
# Recreates the environment of project {name} at commit {commit}.
# Needs a docker-compatible CLI ($RRP_CONTAINER_CLI, default docker),
# sha256sum{curl}.
set -eu
cd "$(dirname "$0")"
cli="${{RRP_CONTAINER_CLI:-docker}}"
port="${{RRP_PORT:-8888}}"
image={image}

want=$(tail -n 1 checksums.txt | cut -d' ' -f1)
have=$(sed '$d' checksums.txt | sha256sum | cut -d' ' -f1)
if [ "$want" != "$have" ]; then
  echo "verification failed: checksums.txt" >&2
  exit 2
fi
if ! sed '$d' checksums.txt | sha256sum -c --quiet - >&2; then
  echo "verification failed" >&2
  exit 2
fi

# Tree digest of a directory: "path\nsha256\n" per file in byte order.
tree_digest() {{
  (cd "$1" && find . -type f | sed 's|^\./||' | LC_ALL=C sort | while IFS= read -r f; do
    printf '%s\n%s\n' "$f" "$(sha256sum "$f" | cut -d' ' -f1)"
  done) | sha256sum | cut -d' ' -f1
}}
"#,
        name = m.project_name.replace('\n', " "),
        commit = m.commit_id,
        curl = if m.kind == BundleKind::Script { ", curl and tar" } else { "" },
        image = sh_quote(&m.image_ref),
    ));

    match &m.image {
        ImageSource::Embedded { embedded_path } => s.push_str(&format!(
            r#"
echo "loading image"
loaded=$("$cli" load -i {path} | sed -n 's/^Loaded image[^:]*: //p' | tail -n 1)
if [ -n "$loaded" ] && [ "$loaded" != "$image" ]; then
  "$cli" tag "$loaded" "$image"
fi
"#,
            path = sh_quote(embedded_path)
        )),
        ImageSource::Remote { remote_reference, .. } => s.push_str(&format!(
            r#"
echo "pulling image"
"$cli" pull {remote}
"$cli" tag {remote} "$image"
"#,
            remote = sh_quote(remote_reference)
        )),
    }

    if m.kind == BundleKind::Script {
        s.push_str(
            r#"
fetch() {
  dir="data/$2"
  if [ -d "$dir" ] && [ "$(tree_digest "$dir")" = "$3" ]; then
    return 0
  fi
  rm -rf "$dir"
  mkdir -p "$dir"
  echo "downloading $1"
  if ! curl -fsSL "$1" | tar -xf - -C "$dir"; then
    echo "download failed: $1" >&2
    exit 2
  fi
  if [ "$(tree_digest "$dir")" != "$3" ]; then
    echo "checksum mismatch: $1" >&2
    exit 2
  fi
}
"#,
        );
        for d in &m.datasets {
            s.push_str(&format!(
                "fetch {} {} {}\n",
                sh_quote(d.url.as_deref().unwrap_or_default()),
                sh_quote(&d.folder),
                d.content_hash
            ));
        }
    }

    s.push_str("\nchmod -R a-w data 2>/dev/null || true\nmkdir -p results\n");
    let mut run = format!("\"$cli\" run --rm -p \"127.0.0.1:$port:{}\"", m.session_port);
    if m.kind == BundleKind::Bundle {
        run.push_str(" \\\n  -v \"$PWD/project:/project\"");
    }
    for d in &m.datasets {
        run.push_str(&format!(" \\\n  -v \"$PWD/data/\"{}\":/openbis/\"{}\":ro\"", sh_quote(&d.folder), sh_quote(&d.folder)));
    }
    run.push_str(" \\\n  -v \"$PWD/results:/results\" \\\n  -e RRP_BASE_URL=/ \\\n  \"$image\"\n");
    s.push_str("echo \"open http://127.0.0.1:$port/ in a browser\"\nexec ");
    s.push_str(&run);
    s
}

pub(crate) fn start_bat(m: &BundleManifest) -> String {
    let mut lines: Vec<String> = vec![
        "@echo off".into(),
        format!("rem Recreates the environment of project {} at commit {}.", m.project_name.replace(['\r', '\n'], " "), m.commit_id),
        "rem Needs a docker-compatible CLI (RRP_CONTAINER_CLI, default docker) and PowerShell.".into(),
        "setlocal".into(),
        "cd /d \"%~dp0\"".into(),
        "if \"%RRP_CONTAINER_CLI%\"==\"\" set RRP_CONTAINER_CLI=docker".into(),
        "if \"%RRP_PORT%\"==\"\" set RRP_PORT=8888".into(),
        format!("set IMAGE={}", m.image_ref),
        concat!(
            "powershell -NoProfile -ExecutionPolicy Bypass -Command \"",
            "$l = Get-Content -LiteralPath checksums.txt; $bad = 0; ",
            "$body = [IO.File]::ReadAllText((Resolve-Path checksums.txt)); $cut = $body.LastIndexOf(\\\"`n\\\", $body.Length - 2) + 1; ",
            "$sha = [Security.Cryptography.SHA256]::Create(); ",
            "$self = -join ($sha.ComputeHash([Text.Encoding]::UTF8.GetBytes($body.Substring(0, $cut))) | ForEach-Object { $_.ToString('x2') }); ",
            "if ($self -ne $l[-1].Split(' ')[0]) { Write-Host 'verification failed: checksums.txt'; exit 2 }; ",
            "foreach ($x in $l[0..($l.Count - 2)]) { $h, $p = $x -split '  ', 2; ",
            "if ((Get-FileHash -Algorithm SHA256 -LiteralPath $p).Hash.ToLower() -ne $h) { Write-Host ('verification failed: ' + $p); $bad = 2 } }; ",
            "exit $bad\""
        )
        .into(),
        "if errorlevel 1 exit /b 2".into(),
    ];
    match &m.image {
        ImageSource::Embedded { embedded_path } => {
            lines.push("echo loading image".into());
            lines.push(format!("%RRP_CONTAINER_CLI% load -i {embedded_path} || exit /b 2"));
        }
        ImageSource::Remote { remote_reference, .. } => {
            lines.push("echo pulling image".into());
            lines.push(format!("%RRP_CONTAINER_CLI% pull {remote_reference} || exit /b 2"));
            lines.push(format!("%RRP_CONTAINER_CLI% tag {remote_reference} %IMAGE% || exit /b 2"));
        }
    }
    if m.kind == BundleKind::Script {
        for d in &m.datasets {
            let url = d.url.as_deref().unwrap_or_default();
            lines.push(format!("echo downloading {url}"));
            lines.push(format!("if not exist \"data\\{f}\" mkdir \"data\\{f}\"", f = d.folder));
            lines.push(format!(
                "curl.exe -fsSL \"{url}\" -o \"data\\{f}.tar\" || exit /b 2",
                f = d.folder
            ));
            lines.push(format!("tar -xf \"data\\{f}.tar\" -C \"data\\{f}\" || exit /b 2", f = d.folder));
            lines.push(format!("del \"data\\{f}.tar\"", f = d.folder));
            lines.push(format!(
                concat!(
                    "powershell -NoProfile -ExecutionPolicy Bypass -Command \"",
                    "$root = (Resolve-Path -LiteralPath {dir}).Path; ",
                    "$files = [string[]](Get-ChildItem -LiteralPath $root -Recurse -File | ForEach-Object {{ $_.FullName.Substring($root.Length + 1).Replace('\\', '/') }}); ",
                    "[Array]::Sort($files, [StringComparer]::Ordinal); $text = ''; ",
                    "foreach ($f in $files) {{ $text += $f + \\\"`n\\\" + (Get-FileHash -Algorithm SHA256 -LiteralPath (Join-Path $root $f)).Hash.ToLower() + \\\"`n\\\" }}; ",
                    "$sha = [Security.Cryptography.SHA256]::Create(); ",
                    "$d = -join ($sha.ComputeHash([Text.Encoding]::UTF8.GetBytes($text)) | ForEach-Object {{ $_.ToString('x2') }}); ",
                    "if ($d -ne '{hash}') {{ Write-Host 'checksum mismatch: {url}'; exit 2 }}\""
                ),
                dir = ps_quote(&format!("data\\{}", d.folder)),
                hash = d.content_hash,
                url = url.replace('\'', "''"),
            ));
            lines.push("if errorlevel 1 exit /b 2".into());
        }
    }
    lines.push("if not exist results mkdir results".into());
    lines.push("echo open http://127.0.0.1:%RRP_PORT%/ in a browser".into());
    let mut run = format!("%RRP_CONTAINER_CLI% run --rm -p 127.0.0.1:%RRP_PORT%:{}", m.session_port);
    if m.kind == BundleKind::Bundle {
        run.push_str(" -v \"%CD%\\project:/project\"");
    }
    for d in &m.datasets {
        run.push_str(&format!(" -v \"%CD%\\data\\{f}:/openbis/{f}:ro\"", f = d.folder));
    }
    run.push_str(" -v \"%CD%\\results:/results\" -e RRP_BASE_URL=/ %IMAGE%");
    lines.push(run);
    let mut out = lines.join("\r\n");
    out.push_str("\r\n");
    out
}
