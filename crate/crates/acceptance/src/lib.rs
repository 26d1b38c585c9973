//! Holds the `acceptance` test target; run it with
//! `cargo test -p inpaint-compose-acceptance --test acceptance`.
