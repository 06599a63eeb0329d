"""catent: desk-scale catalytic and marginal entanglement transformations.

Subpackages
-----------
qstate      dense multipartite states, metrics, entropies, serialization
locc        channels, instruments, structurally local protocols
purecat     pure-state majorization, catalysis and protocol synthesis
catfactory  block catalysts with a cycled register, reuse and reduction checks
measures    hashing and squashed-entanglement bounds, decoupling, composition
distill     two-qubit recurrence distillation and noisy catalyst synthesis
cli         scenario runner producing deterministic reports
"""

__version__ = "0.1.0"
