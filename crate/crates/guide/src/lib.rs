//! Compiles and runs every Rust listing in `book/src` as a doc-test, so the
//! guide cannot drift from the library. One module per chapter keeps failures
//! traceable to their file.

#[cfg(doctest)]
mod chapters {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/hidden-layer.md")]
    mod hidden_layer {}
    #[doc = include_str!("../../../book/src/pseudo-inverse.md")]
    mod pseudo_inverse {}
    #[doc = include_str!("../../../book/src/lda.md")]
    mod lda {}
    #[doc = include_str!("../../../book/src/ensembles.md")]
    mod ensembles {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    mod file_formats {}
}
