"""miqplan: multi-agent trajectory planning via mixed-integer quadratic programming.

A joint quadratic cost over several point-mass vehicles is minimized under
linear dynamics, velocity-region linearizations of orientation-dependent
quantities, convex-cover environment constraints, and big-M agent-to-agent
collision constraints with optional soft safety margins.  The resulting
convex MIQPs are solved by a built-in branch-and-bound solver and executed
in closed loop by a receding-horizon simulator.
"""

from .geometry import (
    ConvexPolygon,
    EmptyDeflation,
    DegenerateInput,
    OrientedRectangle,
    Point2,
    PolygonCover,
    deflate,
    point_in_convex,
    rectangles_overlap,
    triangulate_and_merge,
)

__all__ = [
    "ConvexPolygon",
    "EmptyDeflation",
    "DegenerateInput",
    "OrientedRectangle",
    "Point2",
    "PolygonCover",
    "deflate",
    "point_in_convex",
    "rectangles_overlap",
    "triangulate_and_merge",
]

__version__ = "0.1.0"
