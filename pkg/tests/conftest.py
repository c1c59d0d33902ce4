import pytest

from unislam.config import PipelineConfig, ScenarioConfig, parse_kv
from unislam.pipeline import run_pipeline, simulate_log

# A 12 m x 6 m room with a few obstacles, flown for about 12 s with a reduced
# 271-beam rotating scanner: small enough to run the whole pipeline in seconds.
ROOM_SCENARIO = """
world.box.0 = -0.5 -3.5 -0.5 12.5 3.5 0
world.box.1 = -0.5 -3.5 4 12.5 3.5 4.5
world.box.2 = -0.5 -3.5 0 12.5 -3 4
world.box.3 = -0.5 3 0 12.5 3.5 4
world.box.4 = -0.5 -3 0 0 3 4
world.box.5 = 12 -3 0 12.5 3 4
world.box.6 = 3 -2.5 0 4.5 -1 1.5
world.box.7 = 7 1 0 8 2.5 2.5
world.box.8 = 5.25 -3 0 5.75 -2.6 4
world.box.9 = 9.25 2.6 0 9.75 3 4
trajectory.waypoint.0 = 2 0 2 0 1
trajectory.waypoint.1 = 6 0.3 2.2 0 1
imu.accel_noise = 0.02
imu.gyro_noise = 0.002
imu.accel_bias = 0.02 -0.01 0.02
seed = 3
lidar.kind = rotating2d
lidar.mount = 0.1 0 -0.1 0 0 0
lidar.beams = 271
lidar.max_range = 20
"""

ROOM_SLAM = {
    "N": "8",
    "M": "10",
    "I": "4",
    "distance_map_resolution": "0.25",
    "distance_map_max_range": "5.0",
}


@pytest.fixture(scope="session")
def room_scenario() -> ScenarioConfig:
    return ScenarioConfig.from_dict(parse_kv(ROOM_SCENARIO))


@pytest.fixture(scope="session")
def room_log(room_scenario):
    return simulate_log(room_scenario)


@pytest.fixture(scope="session")
def room_config() -> PipelineConfig:
    return PipelineConfig.from_dict(ROOM_SLAM)


@pytest.fixture(scope="session")
def room_run(room_log, room_config):
    log, _ = room_log
    return run_pipeline(log, room_config)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    results = getattr(test_acceptance, "RESULTS", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
