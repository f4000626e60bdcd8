from .mesh import (
    MeshError,
    TriangleMesh,
    apply_transform,
    bend_nodes,
    cube,
    icosphere,
    load_mesh,
    save_obj,
    tetrahedron,
    tube,
)
from .query import (
    BACKEND,
    ClosestPointIndex,
    MeshDecomposition,
    QueryResult,
    SurfacePoint,
    barycentric,
    closest_point,
    signed_distance,
)

__all__ = [
    "BACKEND",
    "ClosestPointIndex",
    "MeshDecomposition",
    "MeshError",
    "QueryResult",
    "SurfacePoint",
    "TriangleMesh",
    "apply_transform",
    "barycentric",
    "bend_nodes",
    "closest_point",
    "cube",
    "icosphere",
    "load_mesh",
    "save_obj",
    "signed_distance",
    "tetrahedron",
    "tube",
]
