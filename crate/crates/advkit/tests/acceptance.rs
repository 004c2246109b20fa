// acceptance suite
