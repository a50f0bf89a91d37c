"""corrmorph: learned cross point-set correspondence for transferring rigid
driver-surface movement to dense driven-surface deformation.

Subpackages:
    geometry   point sets, meshes, sampling, neighbor queries, interpolation
    fileio     OBJ / PLY / CSV readers and writers
    autodiff   reverse-mode differentiable tensor engine (numpy, float64)
    optim      Adam optimizer
    checkpoint versioned binary parameter container
    network    hierarchical point-set encoders + cross-attention movement model
    losses     shape / density / relative-displacement training objective
    synthdata  synthetic driver/driven case generator with analytic ground truth
    trainer    training loop, simulation, evaluation, ablation driver
    cli        command-line entry point
"""

__version__ = "0.1.0"
