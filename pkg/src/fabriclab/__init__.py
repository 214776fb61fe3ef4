"""fabriclab: a deformable-fabric manipulation workbench.

Subpackages cover cloth simulation (:mod:`fabriclab.sim`), top-down RGB-D
rendering (:mod:`fabriclab.render`), corner perception and image annotation
(:mod:`fabriclab.percept`), action verification (:mod:`fabriclab.verify`),
prompt building and action parsing (:mod:`fabriclab.policy`), a chat
completions client (:mod:`fabriclab.llm`), tasks and metrics
(:mod:`fabriclab.tasks`, :mod:`fabriclab.metrics`) and the experiment harness
(:mod:`fabriclab.harness`, :mod:`fabriclab.cli`).
"""

__version__ = "0.1.0"
