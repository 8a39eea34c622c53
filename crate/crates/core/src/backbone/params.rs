use super::real::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named, ordered parameter tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![T::zero(); p.data.len()],
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Same names and shapes in the same order.
    pub fn check_same_structure(&self, other: &Self) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter sets differ in tensor count: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.shape != b.shape || a.data.len() != b.data.len() {
                return Err(Error::InvalidArgument(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn iter_values(&self) -> impl Iterator<Item = T> + '_ {
        self.params.iter().flat_map(|p| p.data.iter().copied())
    }

    pub fn all_finite(&self) -> bool {
        self.iter_values().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.iter_values().map(|v| v.f64() * v.f64()).sum()
    }

    pub fn fill_zero(&mut self) {
        for p in &mut self.params {
            p.data.fill(T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| U::of(v.f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Student and teacher parameters linked by an exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStudentState<T> {
    pub student: ParamSet<T>,
    pub teacher: ParamSet<T>,
    pub ema_decay: f64,
}

impl<T: Real> TeacherStudentState<T> {
    /// The teacher starts as an exact copy of the student.
    pub fn new(student: ParamSet<T>, ema_decay: f64) -> Result<Self> {
        check_decay(ema_decay)?;
        Ok(Self {
            teacher: student.clone(),
            student,
            ema_decay,
        })
    }

    /// `teacher <- decay * teacher + (1 - decay) * student`, elementwise.
    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, self.ema_decay)
    }
}

fn check_decay(decay: f64) -> Result<()> {
    if (0.0..=1.0).contains(&decay) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "ema_decay must lie in [0, 1], got {decay}"
        )))
    }
}

pub fn ema_update<T: Real>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, decay: f64) -> Result<()> {
    check_decay(decay)?;
    teacher.check_same_structure(student)?;
    let a = T::of(decay);
    let b = T::of(1.0 - decay);
    for (t, s) in teacher.params.iter_mut().zip(&student.params) {
        for (tv, &sv) in t.data.iter_mut().zip(&s.data) {
            *tv = a * *tv + b * sv;
        }
    }
    Ok(())
}
