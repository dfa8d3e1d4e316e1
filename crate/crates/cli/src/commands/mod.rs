pub mod fit;
pub mod scale;
pub mod simulate;
pub mod verify;
