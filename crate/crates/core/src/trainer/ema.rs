use crate::backbone::SegmentationNetwork;
use crate::error::{Error, Result};

/// `min(1 - 1/(10 i + 1), base)`.
pub fn ema_decay(iteration: u64, base_decay: f64) -> f64 {
    let d = 1.0 - 1.0 / (iteration as f64 * 10.0 + 1.0);
    d.min(base_decay)
}

/// `W_stu <- d W_stu + (1 - d) W_tea`, elementwise in f64.
pub fn ema_blend(student: &mut SegmentationNetwork, teacher: &SegmentationNetwork, decay: f64) -> Result<()> {
    if !student.is_congruent(teacher) {
        return Err(Error::ParameterMismatch("teacher and student differ in structure".into()));
    }
    for (s, t) in student.params_mut().iter_mut().zip(teacher.params()) {
        for (sv, &tv) in s.data_mut().iter_mut().zip(t.data()) {
            *sv = (decay * f64::from(*sv) + (1.0 - decay) * f64::from(tv)) as f32;
        }
    }
    Ok(())
}
