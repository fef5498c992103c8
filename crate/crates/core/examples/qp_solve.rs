//! A small bounded QP with one inequality row, solved by the active-set
//! solver used inside the controller.
//!
//!     minimise   ½‖x - (1, 2, 3)‖²
//!     subject to -0.5 ≤ x ≤ 1.5,  x₀ + x₁ + x₂ ≤ 2

use kitchenbot::wbc::qp::{kkt_residuals, solve, QpProblem};
use nalgebra::{DMatrix, DVector};

fn main() {
    let target = DVector::from_vec(vec![1.0, 2.0, 3.0]);
    let problem = QpProblem::unconstrained(DMatrix::identity(3, 3), -&target)
        .with_bounds(DVector::from_element(3, -0.5), DVector::from_element(3, 1.5))
        .with_rows(
            DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]),
            DVector::from_element(1, f64::NEG_INFINITY),
            DVector::from_element(1, 2.0),
        );
    let sol = solve(&problem);
    println!("status      {:?} after {} iterations", sol.status, sol.iterations);
    println!("x           {:.6?}", sol.x.as_slice());
    println!("objective   {:.6}", problem.objective(&sol.x));
    println!("bound mult  {:.6?}", sol.bound_multipliers.as_slice());
    println!("row mult    {:.6?}", sol.row_multipliers.as_slice());
    let kkt = kkt_residuals(&problem, &sol.x, &sol.bound_multipliers, &sol.row_multipliers);
    println!("kkt         {:.2e}", kkt.max());
}
