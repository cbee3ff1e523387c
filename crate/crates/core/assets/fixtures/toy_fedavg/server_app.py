from strategy import FedAvgStrategy
from task import make_points, test

LOCAL_EPOCHS = 2
LEARNING_RATE = 0.1


def gen_evaluate_fn(test_data):
    def evaluate(server_round, parameters):
        loss, accuracy = test(parameters, test_data)
        return loss, {"accuracy": accuracy}

    return evaluate


def on_fit_config(server_round):
    return {"local_epochs": LOCAL_EPOCHS, "lr": LEARNING_RATE, "server_round": server_round}


def server_fn(context):
    central = make_points(context["seed"] * 1000 + 999, 60)
    strategy = FedAvgStrategy(on_fit_config, gen_evaluate_fn(central))
    return strategy, context["num_rounds"]


server_app = server_fn
