use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    let header = crate_dir.join("include").join("eventdiff.h");
    std::fs::create_dir_all(header.parent().unwrap()).ok();

    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("EVENTDIFF_H".to_string()),
        cpp_compat: true,
        documentation: true,
        ..Default::default()
    };
    // Regenerate the committed header; keep the existing one if generation
    // fails so offline builds still work.
    match cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
    {
        Ok(bindings) => {
            bindings.write_to_file(&header);
        }
        Err(e) => {
            println!("cargo:warning=cbindgen failed ({e}); keeping committed header");
        }
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
}
