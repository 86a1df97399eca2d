from .geometry import min_bbox_distance
from .layout import Lane, Pose, RoadLayout, four_way_intersection, get_layout, straight_road
from .observation import encode_pseudo_state, nearest_vehicle_id, pseudo_state_shape
from .vehicle import ACCEL_BOUND, STEER_BOUND, WHEELBASE, Action, Role, VehicleState, step_vehicle, wrap_angle
from .world import (
    D_TH,
    SAFE,
    VIOLATION,
    CollisionEvent,
    StepInfo,
    TrafficConfig,
    WorldState,
    constraint_h,
    h_from_distance,
    initial_world,
    min_distance_to_av,
    remove_vehicles,
    set_role,
    step_world,
)
