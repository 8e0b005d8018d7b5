//! The versioned catalog files under `data/` must match the built-in
//! catalogs. Run with `ACTIVELAB_BLESS=1` to rewrite them after a deliberate
//! catalog change (and bump the catalog version).

use std::path::PathBuf;

use activelab_core::{chem, grn};

fn check(name: &str, doc: serde_json::Value) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name);
    let text = serde_json::to_string_pretty(&doc).unwrap() + "\n";
    if std::env::var_os("ACTIVELAB_BLESS").is_some() {
        std::fs::write(&path, &text).unwrap();
        return;
    }
    let on_disk = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(on_disk == text, "{} is out of date; rerun with ACTIVELAB_BLESS=1", path.display());
}

#[test]
fn chem_catalog_file_is_current() {
    let doc = chem::catalog_document();
    assert_eq!(doc["families"].as_array().unwrap().len(), 57);
    check("chem_catalog.json", doc);
}

#[test]
fn grn_catalog_file_is_current() {
    let doc = grn::catalog_document();
    check("grn_catalog.json", doc);
}
