//! Compiles the harness chapter of the guide (`book/src/harness.md`) as
//! doc-tests, keeping its examples honest against the real interface.

macro_rules! chapter {
    ($name:ident, $path:literal) => {
        #[doc = include_str!($path)]
        #[allow(dead_code)]
        pub struct $name;
    };
}

chapter!(Harness, "../../../book/src/harness.md");
