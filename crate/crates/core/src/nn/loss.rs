use num_traits::Float;

/// Huber loss of a TD error and its derivative with respect to that error.
///
/// Quadratic inside `[-delta, delta]`, linear outside; the derivative is the
/// error clipped to `[-delta, delta]`.
pub fn huber_loss<T: Float>(error: T, delta: T) -> (T, T) {
    let half = T::from(0.5).unwrap();
    if error.abs() <= delta {
        (half * error * error, error)
    } else {
        (delta * (error.abs() - half * delta), delta * error.signum())
    }
}
