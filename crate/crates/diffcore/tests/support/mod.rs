pub mod op_suite;
