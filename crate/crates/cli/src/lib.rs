//! HTTP front end for the question-answering service.

pub mod server;
