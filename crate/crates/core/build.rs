use std::process::Command;

fn main() {
    println!("cargo:rerun-if-changed=../../.git/HEAD");
    println!("cargo:rerun-if-changed=../../.git/index");
    let pkg = env!("CARGO_PKG_VERSION");
    let describe = Command::new("git")
        .args(["describe", "--tags", "--long", "--always", "--dirty", "--abbrev=7"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    let version = match describe {
        // No tag reachable: only the hash (and maybe "-dirty") comes back.
        Some(d) if !d.contains("-g") => format!("v{pkg}-0-g{d}"),
        Some(d) if d.starts_with('v') => d,
        Some(d) => format!("v{d}"),
        None => format!("v{pkg}"),
    };
    println!("cargo:rustc-env=JUMPKAC_VERSION={version}");
}
