"""Meta-learned graph simulator with movement-primitive trajectory heads.

Modules: ``numerics`` (tape autodiff), ``prodmp`` (basis tables and
trajectories), ``meshgraph`` (graph encodings, dataset container), ``mpn``
(message passing), ``model`` (the meta simulator), ``mgn`` (step baseline),
``datagen`` (spring-mass ground truth), ``trainer``, ``evaluation``,
``plotting`` and ``cli``.
"""

__version__ = "0.1.0"
