pub mod cases;
pub mod fixture_server;
pub mod oracle;
