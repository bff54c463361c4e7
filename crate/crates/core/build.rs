use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

fn collect(dir: &Path, out: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_dir() {
            collect(&path, out);
        } else if path.extension().is_some_and(|e| e == "rs") {
            out.push(path);
        }
    }
}

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let mut files = Vec::new();
    collect(&root.join("src"), &mut files);
    files.sort();
    let mut hasher = Sha256::new();
    for path in &files {
        hasher.update(path.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
        hasher.update(fs::read(path).unwrap_or_default());
    }
    let digest = hasher.finalize();
    println!("cargo:rustc-env=SOURCE_CONTENT_HASH={}", hex::encode(&digest[..8]));
    println!("cargo:rerun-if-changed=src");
}
