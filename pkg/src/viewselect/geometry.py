"""
Camera poses on the half-sphere around an object: radius rule, (theta, phi)
grid and pose-to-transform conversion. Angles are degrees at the API.
"""

from dataclasses import dataclass, asdict, field, fields
from typing import Any, Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from utils.errors import ValidationError

TOP_VIEW = (90.0, 90.0)

_WORLD_Z = np.array([0.0, 0.0, 1.0])
_SINGULAR_COS_PHI = 1e-12


@dataclass(frozen=True)
class ObjectGeometry:
    """Object geometric center (meters) and bounding-box dimensions (meters)"""
    gc: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    length: float = 0.2
    width: float = 0.2
    height: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "gc", tuple(float(x) for x in self.gc))
        if len(self.gc) != 3:
            raise ValidationError("Geometric center must be a 3-vector", context={"gc": self.gc})
        bad = [name for name in ("length", "width", "height") if not getattr(self, name) > 0]
        if bad:
            raise ValidationError("Object dimensions must be positive",
                                  violations=[f"geometry.{name}: must be > 0" for name in bad])

    @property
    def diagonal(self) -> float:
        return float(np.sqrt(self.length ** 2 + self.width ** 2 + self.height ** 2))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole focal length and image size, in pixels"""
    focal_px: float = 500.0
    image_width: int = 640
    image_height: int = 480

    def __post_init__(self):
        bad = [name for name in ("focal_px", "image_width", "image_height") if not getattr(self, name) > 0]
        if bad:
            raise ValidationError("Camera intrinsics must be positive",
                                  violations=[f"intrinsics.{name}: must be > 0" for name in bad])


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Camera-to-world rigid transform for one (theta, phi) on the sphere"""
    theta: float
    phi: float
    radius: float
    rotation: np.ndarray
    translation: np.ndarray

    @property
    def position(self) -> np.ndarray:
        return self.translation

    @property
    def quaternion(self) -> np.ndarray:
        """Rotation as a unit quaternion (x, y, z, w)"""
        return Rotation.from_matrix(self.rotation).as_quat()

    def to_line(self) -> str:
        """One-line text form: theta phi x y z qx qy qz qw"""
        values = [self.theta, self.phi, *self.position, *self.quaternion]
        return " ".join(f"{v:.9g}" for v in values)


@dataclass
class GridConfig:
    """Geometry parameters for the pose grid subcommand"""
    theta_step: float = 45.0
    phi_values: List[float] = field(default_factory=lambda: [45.0, 60.0, 75.0])
    exclusions: List[float] = field(default_factory=lambda: [270.0])
    fill: float = 0.7
    gc: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    length: float = 0.2
    width: float = 0.2
    height: float = 0.2
    focal_px: float = 500.0
    image_width: int = 640
    image_height: int = 480

    def violations(self) -> List[str]:
        problems = []
        if not self.theta_step > 0 or (360.0 / self.theta_step) % 1 != 0:
            problems.append("grid.theta_step: must be positive and divide 360")
        if any(not 0 < p <= 90 for p in self.phi_values):
            problems.append("grid.phi_values: every value must lie in (0, 90]")
        if not 0 < self.fill <= 1:
            problems.append("grid.fill: must lie in (0, 1]")
        if len(self.gc) != 3:
            problems.append("grid.gc: must have 3 coordinates")
        for name in ("length", "width", "height", "focal_px", "image_width", "image_height"):
            if not getattr(self, name) > 0:
                problems.append(f"grid.{name}: must be > 0")
        return problems

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'GridConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(
                "Unknown grid configuration keys",
                violations=[f"grid.{key}: unknown key" for key in sorted(unknown)]
            )
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def geometry(self) -> ObjectGeometry:
        return ObjectGeometry(tuple(self.gc), self.length, self.width, self.height)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal_px, self.image_width, self.image_height)


def compute_radius(geom: ObjectGeometry, intr: CameraIntrinsics, fill: float = 0.7) -> float:
    """
    Camera distance at which the bounding-box diagonal spans ``fill`` of the
    smaller image side under a pinhole projection

    Raises:
        ValidationError: If fill is outside (0, 1]
    """
    if not 0 < fill <= 1:
        raise ValidationError("Fill fraction must lie in (0, 1]", context={"fill": fill})
    return intr.focal_px * geom.diagonal / (fill * min(intr.image_width, intr.image_height))


def pose_grid(
    theta_step: float = 45.0,
    phi_values: Sequence[float] = (45.0, 60.0, 75.0),
    exclusions: Iterable[float] = (270.0,),
) -> List[Tuple[float, float]]:
    """
    (theta, phi) lattice ordered by theta then phi

    Args:
        theta_step: Azimuth step in degrees; must divide 360
        phi_values: Elevations in degrees
        exclusions: Azimuths to leave out (unreachable directions)

    Returns:
        List of (theta, phi) pairs

    Raises:
        ValidationError: If the step does not divide 360
    """
    if not theta_step > 0 or (360.0 / theta_step) % 1 != 0:
        raise ValidationError("theta_step must be positive and divide 360", context={"theta_step": theta_step})
    excluded = {float(t) % 360.0 for t in exclusions}
    thetas = [i * theta_step for i in range(int(round(360.0 / theta_step)))]
    return [
        (float(theta), float(phi))
        for theta in thetas if theta not in excluded
        for phi in sorted(float(p) for p in phi_values)
    ]


def pose_to_transform(geom: ObjectGeometry, theta: float, phi: float, radius: float) -> CameraPose:
    """
    Camera-to-world transform looking at the object's center.

    z_cam points at the center, x_cam lies in the world xy-plane and y_cam
    has a non-negative world-z component. At phi = 90 x_cam is fixed to the
    world x-axis.

    Args:
        geom: Object geometry
        theta: Azimuth in degrees
        phi: Elevation in degrees, (0, 90]
        radius: Distance to the center in meters

    Returns:
        CameraPose

    Raises:
        ValidationError: If phi is outside (0, 90] or radius is not positive
    """
    if not 0 < phi <= 90:
        raise ValidationError("phi must lie in (0, 90] degrees", context={"phi": phi})
    if not radius > 0:
        raise ValidationError("radius must be positive", context={"radius": radius})

    t, p = np.radians(theta), np.radians(phi)
    gc = np.asarray(geom.gc, dtype=np.float64)
    direction = np.array([np.cos(p) * np.cos(t), np.cos(p) * np.sin(t), np.sin(p)])
    position = gc + radius * direction

    z_cam = -direction
    if np.cos(p) < _SINGULAR_COS_PHI:
        z_cam = np.array([0.0, 0.0, -1.0])
        x_cam = np.array([1.0, 0.0, 0.0])
    else:
        x_cam = np.cross(_WORLD_Z, z_cam)
        x_cam /= np.linalg.norm(x_cam)
    y_cam = np.cross(z_cam, x_cam)

    rotation = np.column_stack([x_cam, y_cam, z_cam])
    return CameraPose(theta=float(theta), phi=float(phi), radius=float(radius),
                      rotation=rotation, translation=position)


def grid_poses(
    geom: ObjectGeometry,
    intr: CameraIntrinsics,
    fill: float = 0.7,
    theta_step: float = 45.0,
    phi_values: Sequence[float] = (45.0, 60.0, 75.0),
    exclusions: Iterable[float] = (270.0,),
) -> List[CameraPose]:
    """Camera poses for every grid direction at the sizing-rule radius"""
    radius = compute_radius(geom, intr, fill)
    return [pose_to_transform(geom, theta, phi, radius)
            for theta, phi in pose_grid(theta_step, phi_values, exclusions)]
