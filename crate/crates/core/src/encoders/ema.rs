use crate::adapter_net::AdapterParams;
use crate::error::{Result, SecosError};

/// `teacher <- decay * teacher + (1 - decay) * student`, tensor by tensor.
pub fn ema_update(teacher: &mut AdapterParams, student: &AdapterParams, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(SecosError::param(format!("EMA decay must be in [0, 1], got {decay}")));
    }
    if !teacher.same_shape(student) {
        return Err(SecosError::structure("EMA teacher and student tensors differ in shape"));
    }
    for (t, s) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        for (pt, &ps) in t.data.iter_mut().zip(s.data) {
            *pt = decay * *pt + (1.0 - decay) * ps;
        }
    }
    Ok(())
}
