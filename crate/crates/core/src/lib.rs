pub mod cli;
pub mod flow;
pub mod geomgrid;
pub mod mss;
pub mod smallalg;
pub mod verify;
