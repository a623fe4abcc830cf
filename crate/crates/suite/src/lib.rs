//! Acceptance checks for the workspace live in `tests/acceptance.rs`. Run them
//! with `cargo test -p glks-suite --test acceptance`, optionally followed by
//! `-- 3 8` to select criteria by number.
