//! Compiles every fenced Rust block in the guide (`book/src/*.md`) as a
//! doc-test, so the book's examples break loudly when they drift from the
//! library's real interface. Each chapter is attached to a hidden module
//! through `#[doc = include_str!]`; `cargo test` runs them all.

macro_rules! chapter {
    ($name:ident, $path:literal) => {
        #[doc = include_str!($path)]
        #[allow(dead_code)]
        pub struct $name;
    };
}

chapter!(Introduction, "../../../book/src/introduction.md");
chapter!(World, "../../../book/src/world.md");
chapter!(Model, "../../../book/src/model.md");
chapter!(Objectives, "../../../book/src/objectives.md");
chapter!(Scoring, "../../../book/src/scoring.md");
chapter!(Selection, "../../../book/src/selection.md");
chapter!(OnlineSelection, "../../../book/src/online-selection.md");
chapter!(Importance, "../../../book/src/importance.md");
chapter!(Determinism, "../../../book/src/determinism.md");
