pub mod oracle_suite;
pub mod oracles;
