"""Motion-blur-aware articulated Gaussian splatting on CPU.

Modules:

* geom: quaternion / rigid-transform / covariance primitives
* tinynet: dense MLPs with hand-written backprop and Adam
* articulation: kinematic chain, skinning, non-rigid and rigid deformation
* scene: Gaussian cloud container, surface init, densify/prune
* render: camera model, EWA projection, alpha compositing (numba kernels)
* model: the differentiable avatar pipeline composing the above
* blur: exposure trajectories, virtual-pose sampling, blur synthesis, fusion
* train: losses, training loop, evaluation
* synthdata: ground-truth capsule avatar, motion scripts, dataset I/O
* metrics: PSNR / SSIM
* imgio: PFM and PNG image I/O
* checkpoint: deterministic model serialization
* gradcheck: finite-difference validation harness
* cli: command-line entry points
"""

__version__ = "0.1.0"
