//! Keeps the guide honest: each chapter of the book is included as a doc
//! comment here, so `cargo test` compiles and runs every snippet.
