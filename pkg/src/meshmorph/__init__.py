"""Learned r-adaptivity for P1 finite elements on triangle meshes."""
from .adjoint import adjoint_gradient, fd_gradient_oracle, reference_correction
from .burgers import BurgersConfig, burgers_step, interpolate_p1, rollout_remesh
from .deformer import DeformerParams, attention_weights, backward_params, deform, diffuse_block, max_stable_dt
from .fem import FemField, Gaussian, ProblemSpec, l2_error, recover_hessian, recover_monitor, solve_poisson
from .mesh import Mesh, aspect_ratio, build_rect_mesh, is_tangled, mesh_graph, mesh_io, signed_area
from .objective import LossBreakdown, equi_loss, equi_loss_grad, total_loss

__version__ = "0.1.0"
