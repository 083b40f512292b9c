import hypothesis
import numpy as np
import pytest

from fwtraj.clustering import (
    agglomerate_group_average,
    cluster_centers,
    cost_weight_matrix,
    cut_dendrogram,
    distance_matrix,
    select_warm_start,
)
from fwtraj.filtering import FilterConfig, build_virtual_system, particle_filter
from fwtraj.multiagent import build_benchmark, paper_scenario

hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.load_profile("ci")


@pytest.fixture(scope="session")
def two_agent_problem():
    return build_benchmark(paper_scenario("two-agent"))


@pytest.fixture(scope="session")
def two_agent_ensemble(two_agent_problem):
    problem = two_agent_problem
    system = build_virtual_system(problem, nu=10.0)
    config = FilterConfig(
        num_particles=30,
        resample_threshold=12.0,
        sampling_noise=5e-3,
        initial_state=np.concatenate([problem.initial_state, np.zeros(problem.n_u)]),
        initial_covariance=np.eye(system.state_dim),
        seed=1,
    )
    return particle_filter(system, config)


@pytest.fixture(scope="session")
def two_agent_warm_start(two_agent_problem, two_agent_ensemble):
    problem = two_agent_problem
    weight = cost_weight_matrix(problem)
    dend = agglomerate_group_average(
        distance_matrix(two_agent_ensemble.trajectories, weight)
    )
    assignment = cut_dendrogram(dend, 0.5)
    centers = cluster_centers(two_agent_ensemble, assignment)
    warm, scores = select_warm_start(problem, centers)
    return warm
