from .robot_arm import RobotArmConfig, RobotArmEnv, RobotArmWorld, step_box, step_robot_arm
from .scenario import (
    Scenario,
    SceneDescription,
    ScenarioError,
    builtin_scenario,
    load_scenario,
    make_env,
    observe_scene,
    sample_latent_events,
    scenario_from_dict,
)
from .vehicle import (
    LatentEntry,
    SceneObject,
    VehicleConfig,
    VehicleEnv,
    VehicleWorld,
    min_distance,
    step_vehicle,
    time_to_travel,
)

__all__ = [
    "LatentEntry", "RobotArmConfig", "RobotArmEnv", "RobotArmWorld", "Scenario", "SceneDescription",
    "SceneObject", "ScenarioError", "VehicleConfig", "VehicleEnv", "VehicleWorld", "builtin_scenario",
    "load_scenario", "make_env", "min_distance", "observe_scene", "sample_latent_events",
    "scenario_from_dict", "step_box", "step_robot_arm", "step_vehicle", "time_to_travel",
]
