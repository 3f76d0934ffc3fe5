pub mod tensor;
pub mod search;
pub mod trainer;
pub mod network;
pub mod ensemble;
pub mod objectives;
pub mod space;
