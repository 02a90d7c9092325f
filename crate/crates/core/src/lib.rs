pub mod autodiff;
pub mod spectral;
pub mod tensor;
pub mod layers;
pub mod odeint;
pub mod data;
pub mod training;
