//! Float math routed through std when available, libm otherwise, so the rest
//! of the crate never touches the gated inherent methods directly.

#[cfg(feature = "std")]
mod imp {
    pub fn exp(x: f32) -> f32 {
        x.exp()
    }
    pub fn ln(x: f32) -> f32 {
        x.ln()
    }
    pub fn sqrt(x: f32) -> f32 {
        x.sqrt()
    }
    pub fn abs(x: f32) -> f32 {
        x.abs()
    }
    pub fn powi(x: f32, n: i32) -> f32 {
        x.powi(n)
    }
}

#[cfg(not(feature = "std"))]
mod imp {
    pub fn exp(x: f32) -> f32 {
        libm::expf(x)
    }
    pub fn ln(x: f32) -> f32 {
        libm::logf(x)
    }
    pub fn sqrt(x: f32) -> f32 {
        libm::sqrtf(x)
    }
    pub fn abs(x: f32) -> f32 {
        libm::fabsf(x)
    }
    pub fn powi(x: f32, n: i32) -> f32 {
        libm::powf(x, n as f32)
    }
}

pub use imp::*;

/// Numerically stable logistic function; never produces a NaN for finite x.
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}
